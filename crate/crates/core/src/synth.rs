//! Seeded program generator and on-disk dataset builder.
//!
//! Dataset layout:
//!
//! ```text
//! <out>/manifest.txt
//! <out>/images/<id>.ppm
//! <out>/programs/<id>.gui
//! ```
//!
//! Example `id` draws from its own stream seeded with `seed ^ id`, so
//! examples can be produced independently and in any order.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dsl::{self, DslError, LeafTag, Node, ProgramAst, TokenSeq};
use crate::render::{self, Image, RenderError};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("{path}: {source}")]
    Dsl { path: PathBuf, source: DslError },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenConfig {
    pub min_rows: u32,
    pub max_rows: u32,
    pub min_leaves: u32,
    pub max_leaves: u32,
    pub image_size: u32,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { min_rows: 2, max_rows: 6, min_leaves: 1, max_leaves: 4, image_size: 128, seed: 0 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.min_rows < 1 || self.min_rows > self.max_rows {
            return Err(SynthError::InvalidConfig(format!(
                "need 1 <= min_rows <= max_rows, got {}..{}",
                self.min_rows, self.max_rows
            )));
        }
        if self.min_leaves < 1 || self.min_leaves > self.max_leaves {
            return Err(SynthError::InvalidConfig(format!(
                "need 1 <= min_leaves <= max_leaves, got {}..{}",
                self.min_leaves, self.max_leaves
            )));
        }
        if self.image_size < 32 {
            return Err(SynthError::InvalidConfig(format!("image_size {} < 32", self.image_size)));
        }
        Ok(())
    }
}

impl fmt::Display for GenConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "min_rows={} max_rows={} min_leaves={} max_leaves={} image_size={} seed={}",
            self.min_rows, self.max_rows, self.min_leaves, self.max_leaves, self.image_size, self.seed
        )
    }
}

/// Draws a two-level program. Order of draws: the row count, then for each
/// row its leaf count followed by that row's leaf tags.
pub fn gen_program(cfg: &GenConfig, rng: &mut SplitMix64) -> ProgramAst {
    let rows = rng.range_inclusive(cfg.min_rows as u64, cfg.max_rows as u64);
    let children = (0..rows)
        .map(|_| {
            let leaves = rng.range_inclusive(cfg.min_leaves as u64, cfg.max_leaves as u64);
            Node::row((0..leaves).map(|_| LeafTag::ALL[(rng.next_u64() % 7) as usize]))
        })
        .collect();
    ProgramAst::new(children).expect("generator emits the two-level grammar")
}

/// The program for dataset example `id`.
pub fn example_program(cfg: &GenConfig, id: u64) -> ProgramAst {
    gen_program(cfg, &mut SplitMix64::new(cfg.seed ^ id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: u64,
    pub image: PathBuf,
    pub code: PathBuf,
    pub split: Split,
}

/// Index of a built dataset; paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub config: GenConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# {} n_train={} n_test={}\n", self.config, self.n_train, self.n_test);
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.id,
                e.image.display(),
                e.code.display(),
                e.split.as_str()
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let bad = |msg: String| SynthError::Manifest(msg);
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| bad("missing header line".into()))?;
        let mut config = GenConfig::default();
        let (mut n_train, mut n_test) = (None, None);
        for pair in header.split_whitespace() {
            let (key, value) = pair.split_once('=').ok_or_else(|| bad(format!("bad header field `{pair}`")))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("bad value for {key}: `{v}`")));
            match key {
                "min_rows" => config.min_rows = num(value)? as u32,
                "max_rows" => config.max_rows = num(value)? as u32,
                "min_leaves" => config.min_leaves = num(value)? as u32,
                "max_leaves" => config.max_leaves = num(value)? as u32,
                "image_size" => config.image_size = num(value)? as u32,
                "seed" => config.seed = num(value)?,
                "n_train" => n_train = Some(num(value)? as usize),
                "n_test" => n_test = Some(num(value)? as usize),
                _ => return Err(bad(format!("unknown header key `{key}`"))),
            }
        }
        let mut entries = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, image, code, split] = cols[..] else {
                return Err(bad(format!("expected 4 columns in `{line}`")));
            };
            let split = match split {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(bad(format!("unknown split `{other}`"))),
            };
            entries.push(ManifestEntry {
                id: id.parse().map_err(|_| bad(format!("bad id `{id}`")))?,
                image: PathBuf::from(image),
                code: PathBuf::from(code),
                split,
            });
        }
        let n_train = n_train.unwrap_or_else(|| entries.iter().filter(|e| e.split == Split::Train).count());
        let n_test = n_test.unwrap_or(entries.len() - n_train);
        Ok(Manifest { config, n_train, n_test, entries })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = dir.as_ref().join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Self::parse(&text)
    }
}

/// Writes `n_train + n_test` rendered examples and the manifest under `out_dir`.
pub fn build_dataset(
    n_train: usize,
    n_test: usize,
    cfg: &GenConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest, SynthError> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    for sub in ["images", "programs"] {
        let p = out_dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut entries = Vec::with_capacity(n_train + n_test);
    for id in 0..(n_train + n_test) as u64 {
        let ast = example_program(cfg, id);
        let image = PathBuf::from(format!("images/{id}.ppm"));
        let code = PathBuf::from(format!("programs/{id}.gui"));
        let img = render::render(&ast, cfg.image_size, cfg.image_size)?;
        let img_path = out_dir.join(&image);
        fs::write(&img_path, img.to_ppm_bytes()).map_err(io_err(&img_path))?;
        let code_path = out_dir.join(&code);
        fs::write(&code_path, format!("{}\n", dsl::serialize(&ast))).map_err(io_err(&code_path))?;
        let split = if (id as usize) < n_train { Split::Train } else { Split::Test };
        entries.push(ManifestEntry { id, image, code, split });
    }
    let manifest = Manifest { config: *cfg, n_train, n_test, entries };
    let path = out_dir.join("manifest.txt");
    fs::write(&path, manifest.to_text()).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Channel-major `[3, H, W]` tensor with every byte mapped to `x / 255`.
pub fn image_tensor<F: Scalar>(img: &Image) -> Tensor<F> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![F::zero(); 3 * w * h];
    let scale = F::one() / F::of(255.0);
    for (p, rgb) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + p] = F::of(rgb[c] as f64) * scale;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("sizes agree")
}

pub fn load_example<F: Scalar>(
    image_path: impl AsRef<Path>,
    code_path: impl AsRef<Path>,
) -> Result<(Tensor<F>, TokenSeq), SynthError> {
    let img = Image::load_ppm(image_path.as_ref())?;
    let code_path = code_path.as_ref();
    let text = fs::read_to_string(code_path).map_err(io_err(code_path))?;
    let tokens = dsl::tokenize(&text).map_err(|source| SynthError::Dsl { path: code_path.to_path_buf(), source })?;
    Ok((image_tensor(&img), tokens))
}
