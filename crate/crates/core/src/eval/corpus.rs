use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::digest::sha256_hex;
use crate::metrics::QaItem;
use crate::model::{InstructionRecord, Modality, RecordSource};

/// One validation record. Text rows may carry a multiple-choice payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalItem {
    pub id: String,
    pub record: InstructionRecord,
    pub qa: Option<QaItem>,
}

impl EvalItem {
    pub fn ground(&self) -> Modality {
        self.record.output.modality()
    }

    /// Corpus line: the record fields plus `id` and, if present, `qa`.
    pub fn to_json_line(&self) -> String {
        let mut v = self.record.to_value(crate::model::WireProfile::Speech);
        let map = v.as_object_mut().expect("record is an object");
        map.insert("id".into(), self.id.clone().into());
        if let Some(qa) = &self.qa {
            map.insert("qa".into(), serde_json::to_value(qa).expect("serializable"));
        }
        v.to_string()
    }
}

/// Content-derived id used when a line has none.
pub fn default_item_id(record: &InstructionRecord) -> String {
    let key = format!(
        "{}\u{0}{}\u{0}{}",
        record.instruction,
        record.output.modality(),
        record.output.response()
    );
    sha256_hex(key.as_bytes())[..16].to_string()
}

#[derive(Deserialize)]
struct Extra {
    #[serde(default)]
    id: Option<serde_json::Value>,
    #[serde(default)]
    qa: Option<QaItem>,
}

/// Parses and validates the whole file before anything else happens.
pub fn load_eval_corpus(path: &Path) -> Result<Vec<EvalItem>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
    parse_eval_corpus(&text, &path.display().to_string())
}

pub fn parse_eval_corpus(text: &str, origin: &str) -> Result<Vec<EvalItem>, EvalError> {
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Corpus {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let mut record: InstructionRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        record.source = RecordSource::SampledBenchmark;
        let extra: Extra = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        record.validate_for_validation().map_err(|e| err(e.to_string()))?;
        if let Some(qa) = &extra.qa {
            qa.validate().map_err(|e| err(e.to_string()))?;
            if record.output.modality() != Modality::Text {
                return Err(err("qa payload on a non-text record".into()));
            }
        }
        let id = match extra.id {
            None => default_item_id(&record),
            Some(serde_json::Value::String(s)) if !s.trim().is_empty() => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(other) => return Err(err(format!("bad id {other}"))),
        };
        if !seen.insert(id.clone()) {
            return Err(err(format!("duplicate id {id:?}")));
        }
        items.push(EvalItem {
            id,
            record,
            qa: extra.qa,
        });
    }
    if items.is_empty() {
        return Err(EvalError::Corpus {
            path: origin.to_string(),
            line: 0,
            message: "corpus has no records".into(),
        });
    }
    Ok(items)
}

/// Metric value for one item, or why there is none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Score {
    Value { value: f64 },
    /// The prediction failed the eligibility gate.
    Gated,
    Missing { reason: String },
}

impl Score {
    pub fn value(&self) -> Option<f64> {
        match self {
            Score::Value { value } => Some(*value),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_and_qa() {
        let text = r#"{"instruction":"Q1","output":{"type":"text","response":"Paris"},"id":"q1","qa":{"question":"Capital?","choices":["Paris","Rome"],"correct_indices":[0]}}

{"instruction":"Can you show me the famous Japanese painting?","output":{"type":"image","response":"The Great Wave off Kanagawa.","image_id":"24531"}}
{"instruction":"Say hi","output":{"type":"audio","response":"hi"},"id":7}"#;
        let items = parse_eval_corpus(text, "t").unwrap();
        assert_eq!(items.len(), 3);
        assert_eq!(items[0].id, "q1");
        assert_eq!(items[0].qa.as_ref().unwrap().choices.len(), 2);
        assert_eq!(items[1].id, default_item_id(&items[1].record));
        assert_eq!(items[1].record.image_id.as_deref(), Some("24531"));
        assert_eq!(items[2].id, "7");
        assert_eq!(items[2].ground(), Modality::Speech);
        let again = parse_eval_corpus(
            &items.iter().map(EvalItem::to_json_line).collect::<Vec<_>>().join("\n"),
            "t",
        )
        .unwrap();
        assert_eq!(again, items);
    }

    #[test]
    fn rejects_bad_corpora() {
        let dup = "{\"instruction\":\"a\",\"output\":{\"type\":\"text\",\"response\":\"b\"},\"id\":\"x\"}\n{\"instruction\":\"c\",\"output\":{\"type\":\"text\",\"response\":\"d\"},\"id\":\"x\"}";
        assert!(matches!(parse_eval_corpus(dup, "t"), Err(EvalError::Corpus { line: 2, .. })));
        let no_image_id = "{\"instruction\":\"a\",\"output\":{\"type\":\"image\",\"response\":\"b\"}}";
        assert!(parse_eval_corpus(no_image_id, "t").is_err());
        let bad_qa = "{\"instruction\":\"a\",\"output\":{\"type\":\"text\",\"response\":\"b\"},\"qa\":{\"question\":\"q\",\"choices\":[\"x\"],\"correct_indices\":[3]}}";
        assert!(parse_eval_corpus(bad_qa, "t").is_err());
        assert!(parse_eval_corpus("\n\n", "t").is_err());
        assert!(parse_eval_corpus("{not json", "t").is_err());
    }
}
