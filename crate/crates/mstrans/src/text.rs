//! Tokenized text datasets for classification.
//!
//! TSV rows are `label<TAB>space-tokenized text`. The vocabulary is built
//! from the training split only; out-of-vocabulary tokens map to a reserved
//! `<unk>` id. Label names are fixed by the training split, and other
//! splits must not introduce new ones.

use crate::{Error, Result};
use std::collections::HashMap;
use std::path::Path;

pub const UNK_TOKEN: &str = "<unk>";

/// Token-to-id mapping with `<unk>` at id 0.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds from training texts, keeping tokens in first-seen order.
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>) -> Vocabulary {
        let mut v = Vocabulary {
            ids: HashMap::from([(UNK_TOKEN.to_string(), 0)]),
            tokens: vec![UNK_TOKEN.to_string()],
        };
        for text in texts {
            for tok in text.split_whitespace() {
                if !v.ids.contains_key(tok) {
                    v.ids.insert(tok.to_string(), v.tokens.len());
                    v.tokens.push(tok.to_string());
                }
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Encodes whitespace-separated text; unknown tokens become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Vocabulary> {
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.first().map(|t| t.as_str()) != Some(UNK_TOKEN) {
            return Err(Error::Data(format!("vocabulary must start with {UNK_TOKEN}")));
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect::<HashMap<_, _>>();
        if ids.len() != tokens.len() {
            return Err(Error::Data("duplicate token in vocabulary".into()));
        }
        Ok(Vocabulary { ids, tokens })
    }
}

/// Raw rows of a TSV split, before vocabulary/label resolution.
#[derive(Debug, Clone)]
pub struct RawSplit {
    pub labels: Vec<String>,
    pub texts: Vec<String>,
}

/// Parses `label<TAB>text` rows. Empty lines and rows with empty text are
/// errors.
pub fn load_tsv(path: &Path) -> Result<RawSplit> {
    let content =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_tsv(&content, &path.display().to_string())
}

pub fn parse_tsv(content: &str, origin: &str) -> Result<RawSplit> {
    let mut labels = Vec::new();
    let mut texts = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(Error::Data(format!("{origin}: empty line {}", lineno + 1)));
        }
        let Some((label, text)) = line.split_once('\t') else {
            return Err(Error::Data(format!(
                "{origin}: line {} has no tab separator",
                lineno + 1
            )));
        };
        if label.trim().is_empty() || text.trim().is_empty() {
            return Err(Error::Data(format!(
                "{origin}: line {} has an empty label or text",
                lineno + 1
            )));
        }
        labels.push(label.trim().to_string());
        texts.push(text.trim().to_string());
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{origin}: no rows")));
    }
    Ok(RawSplit { labels, texts })
}

/// Encoded, labeled sequences ready for training.
#[derive(Debug, Clone)]
pub struct TextDataset {
    sequences: Vec<Vec<usize>>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl TextDataset {
    /// Encodes a split against a vocabulary and the training label set.
    /// Labels outside `label_names` are a hard error (split mismatch).
    pub fn encode(split: &RawSplit, vocab: &Vocabulary, label_names: &[String]) -> Result<Self> {
        let mut sequences = Vec::with_capacity(split.texts.len());
        let mut labels = Vec::with_capacity(split.labels.len());
        for (label, text) in split.labels.iter().zip(&split.texts) {
            let Some(l) = label_names.iter().position(|n| n == label) else {
                return Err(Error::Data(format!(
                    "label {label:?} not present in the training split (known: {label_names:?})"
                )));
            };
            labels.push(l);
            sequences.push(vocab.encode(text));
        }
        Ok(TextDataset { sequences, labels, n_classes: label_names.len() })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn tokens(&self, i: usize) -> &[usize] {
        &self.sequences[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).max().unwrap_or(0)
    }
}

/// Distinct labels of the training split in first-seen order.
pub fn label_names(split: &RawSplit) -> Vec<String> {
    let mut names = Vec::new();
    for l in &split.labels {
        if !names.contains(l) {
            names.push(l.clone());
        }
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_maps_oov_to_unk() {
        let v = Vocabulary::build(["the cat sat", "the dog"].into_iter());
        assert_eq!(v.id("the"), 1);
        assert_eq!(v.id("unseen"), 0);
        assert_eq!(v.encode("the unseen dog"), vec![1, 0, 4]);
    }

    #[test]
    fn vocabulary_text_roundtrip() {
        let v = Vocabulary::build(["a b c"].into_iter());
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back.len(), v.len());
        assert_eq!(back.id("b"), v.id("b"));
    }

    #[test]
    fn tsv_rejects_empty_lines_and_missing_tabs() {
        assert!(parse_tsv("pos\thello\n\nneg\tbye\n", "t").is_err());
        assert!(parse_tsv("pos hello\n", "t").is_err());
        assert!(parse_tsv("pos\t\n", "t").is_err());
        assert!(parse_tsv("", "t").is_err());
        assert!(parse_tsv("pos\thello world\n", "t").is_ok());
    }

    #[test]
    fn unknown_label_in_other_split_is_error() {
        let train = parse_tsv("pos\tgood\nneg\tbad\n", "train").unwrap();
        let names = label_names(&train);
        let vocab = Vocabulary::build(train.texts.iter().map(|s| s.as_str()));
        let test = parse_tsv("meh\tso so\n", "test").unwrap();
        assert!(TextDataset::encode(&test, &vocab, &names).is_err());
        let ok = parse_tsv("neg\tso so\n", "test").unwrap();
        let ds = TextDataset::encode(&ok, &vocab, &names).unwrap();
        assert_eq!(ds.label(0), 1);
        assert_eq!(ds.tokens(0), &[0, 0]);
    }
}
