//! Dataset schema, JSONL loading, deterministic splitting and the
//! aspect-aware input formatting.

mod collate;
mod synth;
mod vocab;

pub use collate::{collate, decode_image_01, standardize_image, Batch};
pub(crate) use collate::tokenize_to_ids;
pub use synth::{synthesize, ExampleMeta, Motif, SyntheticData, SyntheticSpec};
pub use vocab::{Vocab, CLS_ID, PAD_ID, SEP_ID, UNK_ID};

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

/// Where an example's pixels come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    Path(PathBuf),
    /// Decoded H x W x C unsigned bytes, row-major.
    Raw {
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<u8>,
    },
}

/// One labeled text-image pair. Multi-image examples carry several sources;
/// collation picks one at random.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub images: Vec<ImageSource>,
    pub label: usize,
    pub aspect: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    All,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::All => "all",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// On-disk JSONL record. Unknown keys are rejected so typos surface as
/// schema errors instead of silently ignored fields.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    images: Option<Vec<String>>,
    label: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    aspect: Option<String>,
}

/// Optional first line of a JSONL file fixing the class count.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    num_classes: usize,
}

/// Load a JSONL dataset. Each line is one record; an optional header line
/// `{"num_classes": K}` pins K, otherwise K is inferred as `max(label) + 1`.
/// Image files are not opened here; unreadable paths surface at collation.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    let mut header_k: Option<usize> = None;
    let mut max_label = -1i64;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if lineno == 1 {
            if let Ok(h) = serde_json::from_str::<Header>(&line) {
                header_k = Some(h.num_classes);
                continue;
            }
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: lineno,
            message: e.to_string(),
        })?;
        let schema_err = |message: String| Error::Schema {
            line: lineno,
            message,
        };
        if raw.text.is_empty() {
            return Err(schema_err("text must be non-empty".into()));
        }
        if raw.label < 0 {
            return Err(schema_err(format!("label {} is negative", raw.label)));
        }
        let images = match (raw.image, raw.images) {
            (Some(p), None) => vec![ImageSource::Path(base.join(p))],
            (None, Some(ps)) if !ps.is_empty() => ps
                .into_iter()
                .map(|p| ImageSource::Path(base.join(p)))
                .collect(),
            (None, Some(_)) => return Err(schema_err("images array is empty".into())),
            (Some(_), Some(_)) => {
                return Err(schema_err(
                    "exactly one of `image`/`images` may be present".into(),
                ))
            }
            (None, None) => {
                return Err(schema_err(
                    "one of `image`/`images` is required".into(),
                ))
            }
        };
        if let Some(aspect) = &raw.aspect {
            if aspect.is_empty() {
                return Err(schema_err("aspect must be absent rather than empty".into()));
            }
        }
        if !seen.insert(raw.id.clone()) {
            return Err(Error::DuplicateId(raw.id));
        }
        max_label = max_label.max(raw.label);
        examples.push(Example {
            id: raw.id,
            text: raw.text,
            images,
            label: raw.label as usize,
            aspect: raw.aspect,
        });
    }

    let num_classes = match header_k {
        Some(k) => k,
        None => (max_label + 1).max(0) as usize,
    };
    for ex in &examples {
        if ex.label >= num_classes {
            return Err(Error::InvalidInput(format!(
                "example `{}` has label {} >= num_classes {}",
                ex.id, ex.label, num_classes
            )));
        }
    }
    Ok(Dataset {
        examples,
        num_classes,
        split_tag: SplitTag::All,
    })
}

/// Write a dataset as JSONL with a class-count header. Raw image sources
/// must have been exported to files first (see the synth export path).
pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = serde_json::to_string(&Header {
        num_classes: dataset.num_classes,
    })
    .expect("header serializes");
    writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
    for ex in &dataset.examples {
        let (image, images) = match ex.images.as_slice() {
            [ImageSource::Path(p)] => (Some(p.display().to_string()), None),
            many => {
                let paths = many
                    .iter()
                    .map(|s| match s {
                        ImageSource::Path(p) => Ok(p.display().to_string()),
                        ImageSource::Raw { .. } => Err(Error::InvalidInput(format!(
                            "example `{}` holds raw pixels; export images before saving JSONL",
                            ex.id
                        ))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                (None, Some(paths))
            }
        };
        let raw = RawRecord {
            id: ex.id.clone(),
            text: ex.text.clone(),
            image,
            images,
            label: ex.label as i64,
            aspect: ex.aspect.clone(),
        };
        let line = serde_json::to_string(&raw).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Seeded shuffle followed by a contiguous cut. With ratios `(8,1,1)` the
/// val and test splits each get `floor(N/10)` examples and the remainder
/// goes to train; `explicit_counts` overrides the rule entirely.
pub fn split(
    dataset: &Dataset,
    ratios: (u32, u32, u32),
    seed: u64,
    explicit_counts: Option<(usize, usize, usize)>,
) -> Result<(Dataset, Dataset, Dataset)> {
    let n = dataset.len();
    let (r_tr, r_va, r_te) = ratios;
    if r_tr == 0 || r_va == 0 || r_te == 0 {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    let (n_tr, n_va, n_te) = match explicit_counts {
        Some((a, b, c)) => {
            if a + b + c != n {
                return Err(Error::Config(format!(
                    "explicit counts {}+{}+{} != dataset size {}",
                    a, b, c, n
                )));
            }
            (a, b, c)
        }
        None => {
            let total = (r_tr + r_va + r_te) as usize;
            let n_va = n * r_va as usize / total;
            let n_te = n * r_te as usize / total;
            (n - n_va - n_te, n_va, n_te)
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let take = |range: std::ops::Range<usize>, tag: SplitTag| Dataset {
        examples: order[range]
            .iter()
            .map(|&i| dataset.examples[i].clone())
            .collect(),
        num_classes: dataset.num_classes,
        split_tag: tag,
    };
    Ok((
        take(0..n_tr, SplitTag::Train),
        take(n_tr..n_tr + n_va, SplitTag::Val),
        take(n_tr + n_va..n, SplitTag::Test),
    ))
}

/// `[CLS] text [SEP]`, or `[CLS] text [SEP] aspect [SEP]` for the
/// aspect-based task variant.
pub fn format_input(text: &str, aspect: Option<&str>) -> Result<String> {
    if text.is_empty() {
        return Err(Error::InvalidInput("text must be non-empty".into()));
    }
    match aspect {
        None => Ok(format!("[CLS] {text} [SEP]")),
        Some("") => Err(Error::InvalidInput(
            "aspect must be absent rather than empty".into(),
        )),
        Some(a) => Ok(format!("[CLS] {text} [SEP] {a} [SEP]")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn load_minimal_record() {
        let f = write_lines(&[r#"{"id":"a","text":"hi","image":"a.png","label":0}"#]);
        let ds = load_jsonl(f.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.num_classes, 1);
        assert!(ds.examples[0].aspect.is_none());
    }

    #[test]
    fn load_mvsa_single_shaped_file() {
        // 4511 records, the MVSA-Single total (3611 + 450 + 450).
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for i in 0..4511 {
            writeln!(
                f,
                r#"{{"id":"t{i}","text":"w{i}","image":"img/{i}.jpg","label":{}}}"#,
                i % 3
            )
            .unwrap();
        }
        let ds = load_jsonl(f.path()).unwrap();
        assert_eq!(ds.len(), 4511);
        assert_eq!(ds.num_classes, 3);
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let f = write_lines(&[
            r#"{"id":"x","text":"a","image":"a.png","label":0}"#,
            r#"{"id":"x","text":"b","image":"b.png","label":0}"#,
        ]);
        match load_jsonl(f.path()) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "x"),
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn schema_errors_name_the_line() {
        let f = write_lines(&[
            r#"{"id":"a","text":"hi","image":"a.png","label":0}"#,
            r#"{"id":"b","image":"b.png","label":0}"#,
        ]);
        match load_jsonl(f.path()) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected schema error, got {other:?}"),
        }
        let f = write_lines(&[r#"{"id":"a","text":"hi","image":"a.png","label":0,"bogus":1}"#]);
        assert!(matches!(
            load_jsonl(f.path()),
            Err(Error::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn both_image_fields_rejected() {
        let f = write_lines(&[
            r#"{"id":"a","text":"hi","image":"a.png","images":["b.png"],"label":0}"#,
        ]);
        assert!(matches!(load_jsonl(f.path()), Err(Error::Schema { .. })));
    }

    #[test]
    fn header_line_pins_num_classes() {
        let f = write_lines(&[
            r#"{"num_classes":5}"#,
            r#"{"id":"a","text":"hi","image":"a.png","label":0}"#,
        ]);
        let ds = load_jsonl(f.path()).unwrap();
        assert_eq!(ds.num_classes, 5);
    }

    fn toy_dataset(n: usize) -> Dataset {
        Dataset {
            examples: (0..n)
                .map(|i| Example {
                    id: format!("e{i}"),
                    text: format!("t{i}"),
                    images: vec![ImageSource::Path(format!("{i}.png").into())],
                    label: i % 3,
                    aspect: None,
                })
                .collect(),
            num_classes: 3,
            split_tag: SplitTag::All,
        }
    }

    #[test]
    fn split_exact_division() {
        let ds = toy_dataset(10);
        let (tr, va, te) = split(&ds, (8, 1, 1), 0, None).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
    }

    #[test]
    fn split_explicit_counts_match_published_sizes() {
        let ds = toy_dataset(4511);
        let (tr, va, te) = split(&ds, (8, 1, 1), 1, Some((3611, 450, 450))).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (3611, 450, 450));
        assert!(split(&ds, (8, 1, 1), 1, Some((3611, 450, 451))).is_err());
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let ds = toy_dataset(103);
        let (tr1, va1, te1) = split(&ds, (8, 1, 1), 42, None).unwrap();
        let (tr2, va2, te2) = split(&ds, (8, 1, 1), 42, None).unwrap();
        let ids = |d: &Dataset| d.examples.iter().map(|e| e.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&tr1), ids(&tr2));
        assert_eq!(ids(&va1), ids(&va2));
        assert_eq!(ids(&te1), ids(&te2));

        let mut all: Vec<String> = ids(&tr1)
            .into_iter()
            .chain(ids(&va1))
            .chain(ids(&te1))
            .collect();
        assert_eq!(all.len(), 103);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 103, "splits must be disjoint and exhaustive");
    }

    #[test]
    fn format_input_cases() {
        assert_eq!(
            format_input("good phone", None).unwrap(),
            "[CLS] good phone [SEP]"
        );
        assert_eq!(
            format_input("good phone", Some("battery")).unwrap(),
            "[CLS] good phone [SEP] battery [SEP]"
        );
        assert!(format_input("", Some("x")).is_err());
        assert!(format_input("x", Some("")).is_err());
    }
}
