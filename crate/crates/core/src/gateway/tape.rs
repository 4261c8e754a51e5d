use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    request_key, CompletionRequest, EmbeddingVector, GatewayError, ModelBackend, RequestKind,
    ScoredText, TokenLogprob, EMBED_TAG, SCORE_TAG,
};

/// One canned response. Serialized as a JSON Lines row with fields
/// `key`, `text`, `logprobs?`, `embedding?`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapeEntry {
    pub key: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

/// Recorded responses keyed by request hash.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tape {
    entries: BTreeMap<String, TapeEntry>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&TapeEntry> {
        self.entries.get(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = &TapeEntry> {
        self.entries.values()
    }

    /// Inserts an entry; a second entry under the same key is an error.
    pub fn insert(&mut self, entry: TapeEntry) -> Result<(), GatewayError> {
        if self.entries.contains_key(&entry.key) {
            return Err(GatewayError::CorruptLog(format!("duplicate tape key {}", entry.key)));
        }
        self.entries.insert(entry.key.clone(), entry);
        Ok(())
    }

    pub fn remove(&mut self, key: &str) -> Option<TapeEntry> {
        self.entries.remove(key)
    }

    /// Adds a completion response for `(prompt, tag)`.
    pub fn insert_completion(
        &mut self,
        prompt: &str,
        tag: &str,
        text: impl Into<String>,
    ) -> Result<(), GatewayError> {
        self.insert(TapeEntry {
            key: request_key(prompt, tag),
            text: text.into(),
            logprobs: None,
            embedding: None,
        })
    }

    pub fn insert_scores(&mut self, text: &str, tokens: Vec<TokenLogprob>) -> Result<(), GatewayError> {
        self.insert(TapeEntry {
            key: request_key(text, SCORE_TAG),
            text: text.to_string(),
            logprobs: Some(tokens),
            embedding: None,
        })
    }

    pub fn insert_embedding(&mut self, text: &str, values: Vec<f64>) -> Result<(), GatewayError> {
        self.insert(TapeEntry {
            key: request_key(text, EMBED_TAG),
            text: text.to_string(),
            logprobs: None,
            embedding: Some(values),
        })
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, GatewayError> {
        let mut tape = Tape::default();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TapeEntry = serde_json::from_str(&line)
                .map_err(|e| GatewayError::CorruptLog(format!("tape line {}: {e}", idx + 1)))?;
            tape.insert(entry)?;
        }
        Ok(tape)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<(), GatewayError> {
        for entry in self.entries.values() {
            let line = serde_json::to_string(entry).expect("tape entry serializes");
            writeln!(writer, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), GatewayError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Replays a [`Tape`]. Read-only after construction.
#[derive(Debug, Clone)]
pub struct TapeBackend {
    tape: Tape,
    dimension: Option<usize>,
}

impl TapeBackend {
    /// The embedding dimension is taken from the first embedding on the tape.
    pub fn new(tape: Tape) -> Self {
        let dimension = tape
            .entries()
            .find_map(|e| e.embedding.as_ref().map(Vec::len));
        Self { tape, dimension }
    }

    pub fn with_dimension(mut self, dimension: usize) -> Self {
        self.dimension = Some(dimension);
        self
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn lookup(&self, prompt: &str, tag: &str) -> Result<&TapeEntry, GatewayError> {
        let key = request_key(prompt, tag);
        self.tape.get(&key).ok_or_else(|| GatewayError::TapeMiss {
            key,
            tag: tag.to_string(),
        })
    }
}

impl ModelBackend for TapeBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        Ok(self
            .lookup(&request.prompt_text, &request.request_tag)?
            .text
            .clone())
    }

    fn score_text(&self, text: &str) -> Result<ScoredText, GatewayError> {
        let entry = self.lookup(text, SCORE_TAG)?;
        let tokens = entry
            .logprobs
            .clone()
            .ok_or_else(|| GatewayError::Malformed("tape entry has no logprobs".into()))?;
        Ok(ScoredText {
            text: entry.text.clone(),
            token_logprobs: tokens,
        })
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        let entry = self.lookup(text, EMBED_TAG)?;
        let values = entry
            .embedding
            .clone()
            .ok_or_else(|| GatewayError::Malformed("tape entry has no embedding".into()))?;
        Ok(EmbeddingVector::new(values))
    }

    fn embedding_dimension(&self) -> Option<usize> {
        self.dimension
    }
}

/// One logged request/response pair from a gateway with logging enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLogRow {
    pub key: String,
    pub request_tag: String,
    pub kind: RequestKind,
    pub prompt: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionLog {
    pub rows: Vec<SessionLogRow>,
}

impl SessionLog {
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, GatewayError> {
        let mut rows = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = serde_json::from_str(&line)
                .map_err(|e| GatewayError::CorruptLog(format!("log line {}: {e}", idx + 1)))?;
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<(), GatewayError> {
        for row in &self.rows {
            writeln!(writer, "{}", serde_json::to_string(row).expect("row serializes"))?;
        }
        Ok(())
    }
}

/// Turns a session log into a replay tape.
///
/// Rows repeating an earlier key with an identical response collapse into one
/// entry; a repeated key with a different response is a [`GatewayError::CorruptLog`].
/// Rows whose key does not match their tag and prompt are also rejected.
pub fn record_tape(log: &SessionLog) -> Result<Tape, GatewayError> {
    let mut tape = Tape::default();
    for row in &log.rows {
        if request_key(&row.prompt, &row.request_tag) != row.key {
            return Err(GatewayError::CorruptLog(format!(
                "row for tag {:?} has a key that does not match its prompt",
                row.request_tag
            )));
        }
        let entry = TapeEntry {
            key: row.key.clone(),
            text: row.text.clone(),
            logprobs: row.logprobs.clone(),
            embedding: row.embedding.clone(),
        };
        match tape.get(&row.key) {
            Some(existing) if *existing == entry => {}
            Some(_) => {
                return Err(GatewayError::CorruptLog(format!(
                    "conflicting responses for tag {:?} (key {})",
                    row.request_tag, row.key
                )))
            }
            None => tape.insert(entry)?,
        }
    }
    Ok(tape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Gateway;

    fn ok_tape() -> Tape {
        let mut tape = Tape::default();
        tape.insert_completion("say OK", "t", "OK").unwrap();
        tape.insert_scores(
            "ab",
            vec![
                TokenLogprob { token: "a".into(), logprob: 0.5f64.ln() },
                TokenLogprob { token: "b".into(), logprob: 0.5f64.ln() },
            ],
        )
        .unwrap();
        tape.insert_embedding("hello", vec![0.1, 0.2]).unwrap();
        tape
    }

    #[test]
    fn scripted_echo_and_determinism() {
        let gw = Gateway::from_backend(TapeBackend::new(ok_tape()));
        let a = gw.ask("say OK", "t").unwrap();
        let b = gw.ask("say OK", "t").unwrap();
        assert_eq!(a, "OK");
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn tape_miss_is_reported() {
        let gw = Gateway::from_backend(TapeBackend::new(ok_tape()));
        assert!(matches!(gw.ask("say OK", "other"), Err(GatewayError::TapeMiss { .. })));
        assert!(matches!(gw.ask("unknown", "t"), Err(GatewayError::TapeMiss { .. })));
    }

    #[test]
    fn score_and_embed_passthrough() {
        let gw = Gateway::from_backend(TapeBackend::new(ok_tape()));
        let scored = gw.score_text("ab").unwrap();
        assert_eq!(scored.token_logprobs.len(), 2);
        let v1 = gw.embed("hello").unwrap();
        let v2 = gw.embed("hello").unwrap();
        assert_eq!(v1.values(), &[0.1, 0.2]);
        assert_eq!(v1, v2);
        assert_eq!(v1.dimension(), 2);
    }

    #[test]
    fn wrong_length_embedding_is_dimension_mismatch() {
        let mut tape = ok_tape();
        tape.insert_embedding("wide", vec![0.0; 3]).unwrap();
        let gw = Gateway::from_backend(TapeBackend::new(tape).with_dimension(2));
        assert!(matches!(gw.embed("wide"), Err(GatewayError::DimensionMismatch { .. })));
    }

    #[test]
    fn tape_round_trips_through_jsonl() {
        let tape = ok_tape();
        let mut buf = Vec::new();
        tape.write_jsonl(&mut buf).unwrap();
        let back = Tape::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(tape, back);
        let line = String::from_utf8(buf).unwrap();
        assert!(line.lines().all(|l| l.starts_with("{\"key\":")));
    }

    #[test]
    fn duplicate_tape_keys_rejected_on_load() {
        let row = r#"{"key":"k","text":"a"}"#;
        let err = Tape::read_jsonl(format!("{row}\n{row}\n").as_bytes()).unwrap_err();
        assert!(matches!(err, GatewayError::CorruptLog(_)));
    }

    #[test]
    fn record_tape_replays_a_session() {
        let live = Gateway::from_backend(TapeBackend::new(ok_tape())).with_logging();
        let outputs = vec![
            live.ask("say OK", "t").unwrap(),
            live.score_text("ab").unwrap().text,
            format!("{:?}", live.embed("hello").unwrap()),
        ];
        let log = live.session_log().unwrap();
        assert_eq!(log.rows.len(), 3);
        let tape = record_tape(&log).unwrap();
        assert_eq!(tape.len(), 3);

        let replay = Gateway::from_backend(TapeBackend::new(tape));
        let again = vec![
            replay.ask("say OK", "t").unwrap(),
            replay.score_text("ab").unwrap().text,
            format!("{:?}", replay.embed("hello").unwrap()),
        ];
        assert_eq!(outputs, again);
    }

    #[test]
    fn conflicting_duplicate_rows_are_corrupt() {
        let row = |text: &str| SessionLogRow {
            key: request_key("p", "t"),
            request_tag: "t".into(),
            kind: RequestKind::Complete,
            prompt: "p".into(),
            text: text.into(),
            logprobs: None,
            embedding: None,
        };
        let same = SessionLog { rows: vec![row("a"), row("a")] };
        assert_eq!(record_tape(&same).unwrap().len(), 1);
        let conflict = SessionLog { rows: vec![row("a"), row("b")] };
        assert!(matches!(record_tape(&conflict), Err(GatewayError::CorruptLog(_))));
    }

    #[test]
    fn session_log_jsonl_round_trip() {
        let live = Gateway::from_backend(TapeBackend::new(ok_tape())).with_logging();
        live.ask("say OK", "t").unwrap();
        let log = live.session_log().unwrap();
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        assert_eq!(SessionLog::read_jsonl(buf.as_slice()).unwrap(), log);
        assert!(matches!(
            SessionLog::read_jsonl("not json\n".as_bytes()),
            Err(GatewayError::CorruptLog(_))
        ));
    }
}
