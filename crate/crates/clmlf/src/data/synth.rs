//! Synthetic multimodal corpus with a controllable cross-modal evidence
//! split, used for desk-scale training and the ablation-trend checks.

use super::{Dataset, Example, ImageSource, SplitTag};
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Class-specific pixel pattern stamped into one grid cell. `rows` is an
/// ASCII stencil (`#` lit, anything else untouched) scaled to the cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Motif {
    pub rows: Vec<String>,
    pub channel: usize,
}

fn default_text_words() -> usize {
    8
}
fn default_evidence_per_class() -> usize {
    2
}
fn default_noise_tokens() -> usize {
    30
}
fn default_grid() -> usize {
    4
}
fn default_cell_pixels() -> usize {
    8
}
fn default_noise_level() -> f64 {
    0.15
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_examples: usize,
    #[serde(default = "default_evidence_per_class")]
    pub evidence_tokens_per_class: usize,
    #[serde(default = "default_noise_tokens")]
    pub noise_tokens: usize,
    #[serde(default = "default_text_words")]
    pub text_words: usize,
    pub p_text: f64,
    pub p_image: f64,
    pub complementary: bool,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_cell_pixels")]
    pub cell_pixels: usize,
    #[serde(default = "default_noise_level")]
    pub noise_level: f64,
    /// Exactly one motif per class; defaults are filled in when omitted.
    #[serde(default)]
    pub motifs: Vec<Motif>,
    pub seed: u64,
}

/// Built-in stencils, cycled per class.
fn builtin_motif(class: usize) -> Motif {
    let shapes: [&[&str]; 4] = [
        &["######", "######", "######", "######", "######", "######"],
        &["..##..", "..##..", "######", "######", "..##..", "..##.."],
        &["##...#", "###..#", ".###..", "..###.", "#..###", "#...##"],
        &["######", "#....#", "#....#", "#....#", "#....#", "######"],
    ];
    let shape = shapes[class % shapes.len()];
    Motif {
        rows: shape.iter().map(|s| s.to_string()).collect(),
        channel: class % 3,
    }
}

impl SyntheticSpec {
    /// Sensible defaults for a K-class corpus; callers set `complementary`
    /// and the emission probabilities for the scenario they need.
    pub fn with_defaults(
        num_classes: usize,
        num_examples: usize,
        complementary: bool,
        seed: u64,
    ) -> Self {
        SyntheticSpec {
            num_classes,
            num_examples,
            evidence_tokens_per_class: default_evidence_per_class(),
            noise_tokens: default_noise_tokens(),
            text_words: default_text_words(),
            p_text: 1.0,
            p_image: 1.0,
            complementary,
            grid: default_grid(),
            cell_pixels: default_cell_pixels(),
            noise_level: default_noise_level(),
            motifs: Vec::new(),
            seed,
        }
    }

    pub fn image_side(&self) -> usize {
        self.grid * self.cell_pixels
    }

    /// Evidence token strings for a class, e.g. `ev2_0`, `ev2_1`.
    pub fn evidence_tokens(&self, class: usize) -> Vec<String> {
        (0..self.evidence_tokens_per_class)
            .map(|k| format!("ev{class}_{k}"))
            .collect()
    }

    fn resolved_motifs(&self) -> Vec<Motif> {
        if self.motifs.is_empty() {
            (0..self.num_classes).map(builtin_motif).collect()
        } else {
            self.motifs.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_examples == 0 {
            return Err(Error::Config("num_examples must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.p_text) || !(0.0..=1.0).contains(&self.p_image) {
            return Err(Error::Config("p_text and p_image must lie in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config("noise_level must lie in [0,1]".into()));
        }
        if self.grid == 0 || self.cell_pixels == 0 {
            return Err(Error::Config("grid and cell_pixels must be positive".into()));
        }
        if self.evidence_tokens_per_class == 0 || self.text_words == 0 {
            return Err(Error::Config(
                "evidence_tokens_per_class and text_words must be positive".into(),
            ));
        }
        let motifs = self.resolved_motifs();
        if motifs.len() != self.num_classes {
            return Err(Error::Config(format!(
                "need exactly one motif per class: got {} for {} classes",
                motifs.len(),
                self.num_classes
            )));
        }
        for (i, m) in motifs.iter().enumerate() {
            if m.channel >= 3 {
                return Err(Error::Config(format!("motif {i} channel out of range")));
            }
            if m.rows.is_empty() || m.rows.iter().any(|r| r.is_empty()) {
                return Err(Error::Config(format!("motif {i} stencil is empty")));
            }
        }
        Ok(())
    }
}

/// Generator-side ground truth for one example, kept outside the dataset
/// schema; the attention-alignment checks need the motif location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub id: String,
    pub label: usize,
    /// `(row, col)` grid cell carrying the motif, if any.
    pub motif_cell: Option<(usize, usize)>,
    /// Evidence token present in the text, if any.
    pub evidence_token: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub meta: Vec<ExampleMeta>,
}

fn stamp_motif(
    pixels: &mut [u8],
    side: usize,
    cell_pixels: usize,
    cell: (usize, usize),
    motif: &Motif,
) {
    let (cy, cx) = cell;
    let rows = motif.rows.len();
    let cols = motif.rows.iter().map(|r| r.len()).max().unwrap();
    for py in 0..cell_pixels {
        for px in 0..cell_pixels {
            let sy = py * rows / cell_pixels;
            let sx = px * cols / cell_pixels;
            let lit = motif.rows[sy].as_bytes().get(sx) == Some(&b'#');
            if lit {
                let y = cy * cell_pixels + py;
                let x = cx * cell_pixels + px;
                let base = (y * side + x) * 3;
                pixels[base + motif.channel] = 255;
            }
        }
    }
}

/// Generate a synthetic dataset. Equal specs (including the seed) produce
/// byte-identical output.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let motifs = spec.resolved_motifs();
    let side = spec.image_side();
    let k = spec.num_classes;

    let mut examples = Vec::with_capacity(spec.num_examples);
    let mut meta = Vec::with_capacity(spec.num_examples);
    for i in 0..spec.num_examples {
        let label = rng.random_range(0..k);
        let (text_has, image_has) = if spec.complementary {
            let text_side = rng.random::<f64>() < 0.5;
            (text_side, !text_side)
        } else {
            (
                rng.random::<f64>() < spec.p_text,
                rng.random::<f64>() < spec.p_image,
            )
        };

        let mut words: Vec<String> = (0..spec.text_words)
            .map(|_| format!("n{}", rng.random_range(0..spec.noise_tokens)))
            .collect();
        let evidence_token = if text_has {
            let which = rng.random_range(0..spec.evidence_tokens_per_class);
            let tok = format!("ev{label}_{which}");
            let pos = rng.random_range(0..words.len());
            words[pos] = tok.clone();
            Some(tok)
        } else {
            None
        };

        let mut pixels = vec![0u8; side * side * 3];
        if spec.noise_level > 0.0 {
            let amp = spec.noise_level * 255.0;
            for p in pixels.iter_mut() {
                *p = (rng.random::<f64>() * amp) as u8;
            }
        }
        let motif_cell = if image_has {
            let cell = (
                rng.random_range(0..spec.grid),
                rng.random_range(0..spec.grid),
            );
            stamp_motif(&mut pixels, side, spec.cell_pixels, cell, &motifs[label]);
            Some(cell)
        } else {
            None
        };

        let id = format!("syn{i:06}");
        meta.push(ExampleMeta {
            id: id.clone(),
            label,
            motif_cell,
            evidence_token,
        });
        examples.push(Example {
            id,
            text: words.join(" "),
            images: vec![ImageSource::Raw {
                height: side,
                width: side,
                channels: 3,
                data: pixels,
            }],
            label,
            aspect: None,
        });
    }

    Ok(SyntheticData {
        dataset: Dataset {
            examples,
            num_classes: k,
            split_tag: SplitTag::All,
        },
        meta,
    })
}

/// Write a synthetic dataset to `out_dir` as `dataset.jsonl` (image paths
/// relative to the directory), PNG files under `images/`, the generator
/// ground truth as `meta.jsonl`, and the resolved spec as `spec.json`.
pub fn export_to_dir(data: &SyntheticData, spec: &SyntheticSpec, out_dir: &Path) -> Result<()> {
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut on_disk = data.dataset.clone();
    for ex in on_disk.examples.iter_mut() {
        let [ImageSource::Raw {
            height,
            width,
            data: pixels,
            ..
        }] = ex.images.as_slice()
        else {
            return Err(Error::InvalidInput(format!(
                "example `{}` is not raw synthetic output",
                ex.id
            )));
        };
        let file = images_dir.join(format!("{}.png", ex.id));
        let img =
            image::RgbImage::from_raw(*width as u32, *height as u32, pixels.clone()).unwrap();
        img.save(&file)
            .map_err(|e| Error::Image {
                id: ex.id.clone(),
                message: e.to_string(),
            })?;
        ex.images = vec![ImageSource::Path(format!("images/{}.png", ex.id).into())];
    }
    super::save_jsonl(&on_disk, out_dir.join("dataset.jsonl"))?;

    let meta_path = out_dir.join("meta.jsonl");
    let mut meta_out =
        std::fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    use std::io::Write as _;
    for m in &data.meta {
        let line = serde_json::to_string(m).expect("meta serializes");
        writeln!(meta_out, "{line}").map_err(|e| Error::io(&meta_path, e))?;
    }
    let spec_path = out_dir.join("spec.json");
    let spec_json = serde_json::to_string_pretty(spec).expect("spec serializes");
    std::fs::write(&spec_path, spec_json).map_err(|e| Error::io(&spec_path, e))?;
    Ok(())
}
