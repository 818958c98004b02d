use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::db::LlmCallRecord;
use super::error::LlmError;
use super::mock::scripted_events;
use super::prompt::{LlmOutput, Prompt};
use super::provider::LlmProvider;
use super::stream::{Chunking, EventSource};

/// Serves stored outputs for prompts whose content (ignoring the prompt id)
/// matches a recorded call. Never contacts a model.
///
/// Identical prompts recorded more than once are served in recording order.
pub struct ReplayProvider {
    records: Vec<LlmCallRecord>,
    queues: Mutex<HashMap<String, VecDeque<usize>>>,
    served: AtomicUsize,
}

impl ReplayProvider {
    pub fn new(records: Vec<LlmCallRecord>) -> Self {
        let mut queues: HashMap<String, VecDeque<usize>> = HashMap::new();
        for (i, record) in records.iter().enumerate() {
            queues.entry(record.prompt.content_key()).or_default().push_back(i);
        }
        Self {
            records,
            queues: Mutex::new(queues),
            served: AtomicUsize::new(0),
        }
    }

    /// Number of prompts answered so far.
    pub fn served(&self) -> usize {
        self.served.load(Ordering::SeqCst)
    }

    pub fn lookup(&self, prompt: &Prompt) -> Result<&LlmCallRecord, LlmError> {
        let mut queues = self.queues.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(index) = queues.get_mut(&prompt.content_key()).and_then(VecDeque::pop_front) {
            self.served.fetch_add(1, Ordering::SeqCst);
            return Ok(&self.records[index]);
        }
        Err(self.mismatch(prompt))
    }

    /// Error naming the recorded call sharing the longest message prefix;
    /// ties go to a call with as many messages, then to the earliest.
    fn mismatch(&self, prompt: &Prompt) -> LlmError {
        let closest = self.records.iter().enumerate().max_by_key(|(i, r)| {
            let shared = r
                .prompt
                .messages
                .iter()
                .zip(&prompt.messages)
                .take_while(|(a, b)| a == b)
                .count();
            (shared, r.prompt.messages.len() == prompt.messages.len(), std::cmp::Reverse(*i))
        });
        let closest = closest.map(|(_, r)| r);
        match closest {
            Some(record) => LlmError::PromptMismatch {
                prompt_id: record.prompt_id.clone(),
                message_index: record.prompt.first_difference(prompt),
            },
            None => LlmError::MissingRecord(prompt.id.clone()),
        }
    }

    pub fn output_for(&self, prompt: &Prompt) -> Result<LlmOutput, LlmError> {
        Ok(self.lookup(prompt)?.output.clone())
    }
}

impl LlmProvider for ReplayProvider {
    fn model_name(&self) -> &str {
        "replay"
    }

    fn stream(&self, prompt: &Prompt) -> Result<EventSource<'static>, LlmError> {
        let output = self.output_for(prompt)?;
        Ok(scripted_events(output, Chunking::Words))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::prompt::Message;

    fn record(messages: Vec<Message>, output: &str) -> LlmCallRecord {
        let prompt = Prompt::new(messages);
        LlmCallRecord {
            prompt_id: prompt.id.clone(),
            model: "mock".into(),
            prompt,
            output: LlmOutput::text(output),
            input_tokens: 0,
            output_tokens: 0,
            created_at: String::new(),
        }
    }

    #[test]
    fn matching_prompt_returns_stored_output() {
        let rec = record(vec![Message::system("s"), Message::user("u")], "stored");
        let provider = ReplayProvider::new(vec![rec]);
        let fresh = Prompt::new(vec![Message::system("s"), Message::user("u")]);
        assert_eq!(provider.output_for(&fresh).unwrap(), LlmOutput::text("stored"));
        assert_eq!(provider.served(), 1);
    }

    #[test]
    fn repeated_prompts_served_in_order() {
        let provider = ReplayProvider::new(vec![
            record(vec![Message::user("u")], "first"),
            record(vec![Message::user("u")], "second"),
        ]);
        let p = Prompt::new(vec![Message::user("u")]);
        assert_eq!(provider.output_for(&p).unwrap().content_str(), "first");
        assert_eq!(provider.output_for(&p).unwrap().content_str(), "second");
        assert!(provider.output_for(&p).is_err());
    }

    #[test]
    fn mismatch_names_first_differing_message() {
        let rec = record(vec![Message::system("s"), Message::user("a"), Message::user("b")], "x");
        let id = rec.prompt_id.clone();
        let other = record(vec![Message::system("zzz")], "y");
        let provider = ReplayProvider::new(vec![other, rec]);
        let changed = Prompt::new(vec![Message::system("s"), Message::user("a"), Message::user("c")]);
        match provider.output_for(&changed) {
            Err(LlmError::PromptMismatch { prompt_id, message_index }) => {
                assert_eq!(prompt_id, id);
                assert_eq!(message_index, Some(2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_provider_reports_missing_record() {
        let provider = ReplayProvider::new(vec![]);
        let p = Prompt::new(vec![Message::user("u")]);
        assert!(matches!(provider.output_for(&p), Err(LlmError::MissingRecord(_))));
    }
}
