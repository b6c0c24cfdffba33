//! Code grouping and vocabulary construction.
//!
//! Raw diagnosis codes collapse to their category: numeric and V codes keep
//! the 3-character category, E codes keep 4 characters. Medication codes are
//! written with an `rx:` prefix and keep a configurable class prefix of the
//! identifier (2 characters by default).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Vector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodeKind {
    DiagnosisGroup,
    MedicationGroup,
    Other,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingConfig {
    /// Characters of the medication identifier that name its drug class.
    pub rx_class_prefix_len: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig { rx_class_prefix_len: 2 }
    }
}

/// Collapse a raw code to its grouped category. Idempotent.
pub fn group_code(raw: &str, config: &GroupingConfig) -> Result<String> {
    let code = raw.trim();
    if code.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "empty code string".to_string(),
        });
    }
    if let Some(rest) = code.strip_prefix("rx:") {
        if rest.is_empty() {
            return Err(Error::Parse {
                line: 0,
                msg: format!("medication code '{code}' has no identifier"),
            });
        }
        let keep = rest.len().min(config.rx_class_prefix_len.max(1));
        return Ok(format!("rx:{}", &rest[..keep]));
    }

    let head = code.chars().next().unwrap();
    let body = code.split('.').next().unwrap();
    match head {
        '0'..='9' => {
            if !body.chars().all(|c| c.is_ascii_digit()) {
                return Err(malformed(code));
            }
            let digits = &body[..body.len().min(3)];
            Ok(format!("{digits:0>3}"))
        }
        'V' | 'v' => {
            let digits = &body[1..];
            if digits.len() < 2 || !digits.chars().all(|c| c.is_ascii_digit()) {
                return Err(malformed(code));
            }
            Ok(format!("V{}", &digits[..2]))
        }
        'E' | 'e' => {
            let digits = &body[1..];
            if digits.len() < 3 || !digits.chars().all(|c| c.is_ascii_digit()) {
                return Err(malformed(code));
            }
            Ok(format!("E{}", &digits[..3]))
        }
        _ => {
            // Anything else passes through untouched as an "other" code.
            Ok(code.to_string())
        }
    }
}

fn malformed(code: &str) -> Error {
    Error::Parse {
        line: 0,
        msg: format!("malformed code '{code}'"),
    }
}

/// Kind tag inferred from a grouped code's shape.
pub fn code_kind(grouped: &str) -> CodeKind {
    if grouped.starts_with("rx:") {
        CodeKind::MedicationGroup
    } else if grouped
        .chars()
        .next()
        .map(|c| c.is_ascii_digit() || matches!(c, 'V' | 'E'))
        .unwrap_or(false)
    {
        CodeKind::DiagnosisGroup
    } else {
        CodeKind::Other
    }
}

/// Bijective map between grouped code strings and dense indices.
#[derive(Clone, Debug)]
pub struct CodeVocabulary {
    index_of: HashMap<String, usize>,
    codes: Vec<String>,
    kinds: Vec<CodeKind>,
}

impl CodeVocabulary {
    /// Build from grouped codes in first-occurrence order.
    pub fn from_code_stream<'a>(stream: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut vocab = CodeVocabulary {
            index_of: HashMap::new(),
            codes: Vec::new(),
            kinds: Vec::new(),
        };
        for code in stream {
            vocab.intern(code);
        }
        if vocab.codes.is_empty() {
            return Err(Error::InsufficientData(
                "cannot build a vocabulary from zero codes".to_string(),
            ));
        }
        Ok(vocab)
    }

    fn intern(&mut self, code: &str) -> usize {
        if let Some(&idx) = self.index_of.get(code) {
            return idx;
        }
        let idx = self.codes.len();
        self.index_of.insert(code.to_string(), idx);
        self.codes.push(code.to_string());
        self.kinds.push(code_kind(code));
        idx
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn index(&self, code: &str) -> Option<usize> {
        self.index_of.get(code).copied()
    }

    pub fn require_index(&self, code: &str) -> Result<usize> {
        self.index(code).ok_or_else(|| Error::UnknownCode(code.to_string()))
    }

    pub fn code(&self, index: usize) -> &str {
        &self.codes[index]
    }

    pub fn kind(&self, index: usize) -> CodeKind {
        self.kinds[index]
    }

    /// Codes in index order.
    pub fn codes(&self) -> &[String] {
        &self.codes
    }
}

/// Multi-hot encoding of a visit's code set.
pub fn encode_visit<'a>(
    codes: impl IntoIterator<Item = &'a str>,
    vocab: &CodeVocabulary,
) -> Result<Vector> {
    let mut out = Vector::zeros(vocab.len());
    for code in codes {
        let idx = vocab.require_index(code)?;
        out[idx] = 1.0;
    }
    Ok(out)
}

/// Sorted vocabulary indices of a visit's code set.
pub fn encode_visit_indices<'a>(
    codes: impl IntoIterator<Item = &'a str>,
    vocab: &CodeVocabulary,
) -> Result<Vec<usize>> {
    let mut idx: Vec<usize> = codes
        .into_iter()
        .map(|c| vocab.require_index(c))
        .collect::<Result<_>>()?;
    idx.sort_unstable();
    idx.dedup();
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn group(raw: &str) -> String {
        group_code(raw, &GroupingConfig::default()).unwrap()
    }

    #[test]
    fn groups_icd9_examples() {
        assert_eq!(group("011.01"), "011");
        assert_eq!(group("401.9"), "401");
        assert_eq!(group("V58.61"), "V58");
        assert_eq!(group("E812.0"), "E812");
    }

    #[test]
    fn groups_undotted_and_short_codes() {
        assert_eq!(group("4019"), "401");
        assert_eq!(group("42"), "042");
        assert_eq!(group("V5861"), "V58");
        assert_eq!(group("E8120"), "E812");
    }

    #[test]
    fn groups_medication_codes_by_class_prefix() {
        assert_eq!(group("rx:65990020001020"), "rx:65");
        let cfg = GroupingConfig { rx_class_prefix_len: 4 };
        assert_eq!(group_code("rx:65990020001020", &cfg).unwrap(), "rx:6599");
    }

    #[test]
    fn rejects_malformed_codes() {
        assert!(group_code("", &GroupingConfig::default()).is_err());
        assert!(group_code("  ", &GroupingConfig::default()).is_err());
        assert!(group_code("4x1.9", &GroupingConfig::default()).is_err());
        assert!(group_code("V5", &GroupingConfig::default()).is_err());
        assert!(group_code("E81", &GroupingConfig::default()).is_err());
        assert!(group_code("rx:", &GroupingConfig::default()).is_err());
    }

    #[test]
    fn kind_tags() {
        assert_eq!(code_kind("401"), CodeKind::DiagnosisGroup);
        assert_eq!(code_kind("V58"), CodeKind::DiagnosisGroup);
        assert_eq!(code_kind("E812"), CodeKind::DiagnosisGroup);
        assert_eq!(code_kind("rx:65"), CodeKind::MedicationGroup);
        assert_eq!(code_kind("misc"), CodeKind::Other);
    }

    #[test]
    fn vocabulary_first_occurrence_order() {
        let vocab = CodeVocabulary::from_code_stream(["A", "B", "A"]).unwrap();
        assert_eq!(vocab.len(), 2);
        assert_eq!(vocab.index("A"), Some(0));
        assert_eq!(vocab.index("B"), Some(1));
        assert_eq!(vocab.code(1), "B");
    }

    #[test]
    fn vocabulary_single_code() {
        let vocab = CodeVocabulary::from_code_stream(["X", "X", "X"]).unwrap();
        assert_eq!(vocab.len(), 1);
    }

    #[test]
    fn vocabulary_requires_codes() {
        assert!(CodeVocabulary::from_code_stream([]).is_err());
    }

    #[test]
    fn encode_multi_hot() {
        let vocab = CodeVocabulary::from_code_stream(["A", "B", "C"]).unwrap();
        let x = encode_visit(["A", "C"], &vocab).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 0.0, 1.0]);
        let y = encode_visit(["B"], &vocab).unwrap();
        assert_eq!(y.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn encode_unknown_code_names_offender() {
        let vocab = CodeVocabulary::from_code_stream(["A"]).unwrap();
        let err = encode_visit(["D"], &vocab).unwrap_err();
        assert!(err.to_string().contains("'D'"));
    }

    #[test]
    fn encode_round_trip() {
        let vocab = CodeVocabulary::from_code_stream(["401", "V58", "rx:65"]).unwrap();
        let codes = ["rx:65", "401"];
        let idx = encode_visit_indices(codes, &vocab).unwrap();
        let mut decoded: Vec<&str> = idx.iter().map(|&i| vocab.code(i)).collect();
        decoded.sort_unstable();
        let mut expected = codes.to_vec();
        expected.sort_unstable();
        assert_eq!(decoded, expected);
    }

    proptest! {
        #[test]
        fn grouping_is_idempotent(code in "([0-9]{1,4}|V[0-9]{2,4}|E[0-9]{3,4})(\\.[0-9]{1,2})?") {
            let cfg = GroupingConfig::default();
            let once = group_code(&code, &cfg).unwrap();
            let twice = group_code(&once, &cfg).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn rx_grouping_is_idempotent(id in "[0-9]{1,12}", len in 1usize..6) {
            let cfg = GroupingConfig { rx_class_prefix_len: len };
            let once = group_code(&format!("rx:{id}"), &cfg).unwrap();
            let twice = group_code(&once, &cfg).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
