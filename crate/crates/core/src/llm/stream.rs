use std::sync::{Arc, OnceLock};

use super::error::LlmError;
use super::prompt::{LlmOutput, Usage};

#[derive(Debug, Clone, PartialEq)]
pub enum StreamEvent {
    Chunk(String),
    Done { output: LlmOutput, usage: Option<Usage> },
}

/// Raw provider event source.
pub type EventSource<'a> = Box<dyn Iterator<Item = Result<StreamEvent, LlmError>> + Send + 'a>;

type OnComplete<'a> = Box<dyn FnOnce(&LlmOutput, Option<Usage>) -> Result<(), LlmError> + 'a>;
type ChunkObserver<'a> = Box<dyn FnMut(&str) + 'a>;

/// Shared slot that receives the final output once a stream completes.
#[derive(Debug, Clone, Default)]
pub struct CompletionHandle(Arc<OnceLock<LlmOutput>>);

impl CompletionHandle {
    pub fn get(&self) -> Option<&LlmOutput> {
        self.0.get()
    }
}

/// Incremental output of one LLM call, consumed at most once.
///
/// Yields text chunks followed by exactly one `Done`. The completion hook
/// (normally the call recorder) runs before `Done` is yielded, so a consumer
/// that has seen `Done` can rely on the call being persisted. The null
/// stream yields nothing.
pub struct LlmStream<'a> {
    source: Option<EventSource<'a>>,
    on_complete: Option<OnComplete<'a>>,
    observer: Option<ChunkObserver<'a>>,
    accumulated: String,
    saw_chunk: bool,
    pending: Option<StreamEvent>,
    completion: CompletionHandle,
    finished: bool,
}

impl<'a> LlmStream<'a> {
    pub fn new(source: EventSource<'a>) -> Self {
        Self {
            source: Some(source),
            on_complete: None,
            observer: None,
            accumulated: String::new(),
            saw_chunk: false,
            pending: None,
            completion: CompletionHandle::default(),
            finished: false,
        }
    }

    pub fn null() -> Self {
        let mut stream = Self::new(Box::new(std::iter::empty()));
        stream.source = None;
        stream.finished = true;
        stream
    }

    /// Stream over a complete output, split into the given chunks.
    pub fn from_chunks(chunks: Vec<String>, output: LlmOutput, usage: Option<Usage>) -> Self {
        let events = chunks
            .into_iter()
            .map(StreamEvent::Chunk)
            .chain(std::iter::once(StreamEvent::Done { output, usage }))
            .map(Ok);
        Self::new(Box::new(events.collect::<Vec<_>>().into_iter()))
    }

    pub fn is_null(&self) -> bool {
        self.source.is_none()
    }

    pub fn on_complete(
        mut self,
        hook: impl FnOnce(&LlmOutput, Option<Usage>) -> Result<(), LlmError> + 'a,
    ) -> Self {
        self.on_complete = Some(Box::new(hook));
        self
    }

    /// Calls `observer` with the accumulated text after every chunk.
    pub fn observe(mut self, observer: impl FnMut(&str) + 'a) -> Self {
        self.observer = Some(Box::new(observer));
        self
    }

    pub fn completion(&self) -> CompletionHandle {
        self.completion.clone()
    }

    /// Drains the stream. Returns `None` for the null stream.
    pub fn into_output(self) -> Result<Option<LlmOutput>, LlmError> {
        if self.is_null() {
            return Ok(None);
        }
        for event in self {
            if let StreamEvent::Done { output, .. } = event? {
                return Ok(Some(output));
            }
        }
        Err(LlmError::Transport("stream ended without a final output".into()))
    }

    fn push_chunk(&mut self, chunk: &str) {
        self.saw_chunk = true;
        self.accumulated.push_str(chunk);
        if let Some(observer) = self.observer.as_mut() {
            observer(&self.accumulated);
        }
    }

    fn finish(&mut self, output: LlmOutput, usage: Option<Usage>) -> Result<StreamEvent, LlmError> {
        if self.saw_chunk && output.content_str() != self.accumulated {
            return Err(LlmError::Transport(
                "streamed chunks do not add up to the final content".into(),
            ));
        }
        if let Some(hook) = self.on_complete.take() {
            hook(&output, usage)?;
        }
        let _ = self.completion.0.set(output.clone());
        Ok(StreamEvent::Done { output, usage })
    }
}

impl Iterator for LlmStream<'_> {
    type Item = Result<StreamEvent, LlmError>;

    fn next(&mut self) -> Option<Self::Item> {
        if let Some(StreamEvent::Done { output, usage }) = self.pending.take() {
            self.finished = true;
            return Some(self.finish(output, usage));
        }
        if self.finished {
            return None;
        }
        let source = self.source.as_mut()?;
        let item = match source.next() {
            Some(Ok(StreamEvent::Chunk(chunk))) => {
                self.push_chunk(&chunk);
                Ok(StreamEvent::Chunk(chunk))
            }
            Some(Ok(StreamEvent::Done { output, usage })) => {
                // Providers that deliver the whole text at once still yield
                // one chunk so consumers see a uniform event sequence.
                match output.content.clone() {
                    Some(text) if !self.saw_chunk && !text.is_empty() => {
                        self.push_chunk(&text);
                        self.pending = Some(StreamEvent::Done { output, usage });
                        Ok(StreamEvent::Chunk(text))
                    }
                    _ => {
                        self.finished = true;
                        self.finish(output, usage)
                    }
                }
            }
            Some(Err(e)) => {
                self.finished = true;
                Err(e)
            }
            None => {
                self.finished = true;
                Err(LlmError::Transport("stream ended without a final output".into()))
            }
        };
        Some(item)
    }
}

/// How a complete text is split into stream chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "size")]
pub enum Chunking {
    /// Each chunk is a word with its trailing whitespace.
    #[default]
    Words,
    /// Fixed number of characters per chunk.
    Fixed(usize),
}

impl Chunking {
    pub fn split(self, text: &str) -> Vec<String> {
        match self {
            Chunking::Words => {
                let mut chunks = Vec::new();
                let mut current = String::new();
                let mut in_space = false;
                for c in text.chars() {
                    if !c.is_whitespace() && in_space {
                        chunks.push(std::mem::take(&mut current));
                        in_space = false;
                    }
                    if c.is_whitespace() {
                        in_space = true;
                    }
                    current.push(c);
                }
                if !current.is_empty() {
                    chunks.push(current);
                }
                chunks
            }
            Chunking::Fixed(size) => {
                let chars: Vec<char> = text.chars().collect();
                chars
                    .chunks(size.max(1))
                    .map(|c| c.iter().collect())
                    .collect()
            }
        }
    }
}
