//! Browser bindings for rendering programs and running a trained model on
//! the rendered screenshot.

use guicoder::dsl::{self, ProgramAst, Vocab};
use guicoder::model::{Model, ModelConfig, Strategy};
use guicoder::nn::ModelParams;
use guicoder::render::{self, Image};
use guicoder::rng::SplitMix64;
use guicoder::synth::{gen_program, image_tensor, GenConfig};
use wasm_bindgen::prelude::*;

fn parse_source(source: &str) -> Result<ProgramAst, String> {
    let tokens = dsl::tokenize(source).map_err(|e| e.to_string())?;
    dsl::parse(tokens.ids()).map_err(|e| e.to_string())
}

fn block_lines(ast: &ProgramAst) -> Result<String, String> {
    let vocab = Vocab::canonical();
    let blocks = dsl::blockify(ast.tokens().ids()).map_err(|e| e.to_string())?;
    let lines: Vec<String> = blocks
        .iter()
        .map(|b| b.iter().map(|&t| vocab.word(t).unwrap_or("?")).collect::<Vec<_>>().join(" "))
        .collect();
    Ok(lines.join("\n"))
}

/// A rendered program with its derived views.
#[wasm_bindgen]
pub struct Rendered {
    rgba: Vec<u8>,
    size: u32,
    canonical: String,
    html: String,
    blocks: String,
}

#[wasm_bindgen]
impl Rendered {
    /// RGBA bytes, ready for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> u32 {
        self.size
    }

    #[wasm_bindgen(getter)]
    pub fn canonical(&self) -> String {
        self.canonical.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn html(&self) -> String {
        self.html.clone()
    }

    /// One block per line.
    #[wasm_bindgen(getter)]
    pub fn blocks(&self) -> String {
        self.blocks.clone()
    }
}

fn render_inner(source: &str, size: u32) -> Result<Rendered, String> {
    let ast = parse_source(source)?;
    let img = render::render(&ast, size, size).map_err(|e| e.to_string())?;
    Ok(Rendered {
        rgba: img.to_rgba(),
        size,
        canonical: dsl::serialize(&ast),
        html: render::export_html(&ast),
        blocks: block_lines(&ast)?,
    })
}

/// Parses DSL source and renders it as a `size` x `size` screenshot.
#[wasm_bindgen]
pub fn render_program(source: &str, size: u32) -> Result<Rendered, JsError> {
    render_inner(source, size).map_err(|e| JsError::new(&e))
}

/// A program from the synthetic generator with default ranges.
#[wasm_bindgen]
pub fn random_program(seed: u32) -> String {
    dsl::serialize(&gen_program(&GenConfig::default(), &mut SplitMix64::new(seed as u64)))
}

/// A trained model loaded from a weights file.
#[wasm_bindgen]
pub struct Predictor {
    params: ModelParams<f32>,
}

fn rgba_to_image(rgba: &[u8], size: u32) -> Result<Image, String> {
    if rgba.len() != (size * size * 4) as usize {
        return Err(format!("expected {} RGBA bytes for a {size}x{size} image, got {}", size * size * 4, rgba.len()));
    }
    let rgb: Vec<u8> = rgba.chunks_exact(4).flat_map(|px| [px[0], px[1], px[2]]).collect();
    Image::from_raw(size, size, rgb).map_err(|e| e.to_string())
}

impl Predictor {
    fn load(bytes: &[u8]) -> Result<Predictor, String> {
        let params = ModelParams::from_bytes(bytes).map_err(|e| e.to_string())?;
        ModelConfig::from_params(&params, &ModelConfig::desk()).map_err(|e| e.to_string())?;
        Ok(Predictor { params })
    }

    fn run(&self, rgba: &[u8], size: u32, beam: usize) -> Result<String, String> {
        let img = rgba_to_image(rgba, size)?;
        let base = ModelConfig { image_size: size as usize, ..ModelConfig::desk() };
        let cfg = ModelConfig::from_params(&self.params, &base).map_err(|e| e.to_string())?;
        let model = Model::new(&cfg, &self.params).map_err(|e| e.to_string())?;
        let result = model.decode(&image_tensor(&img), Strategy::from_width(beam)).map_err(|e| e.to_string())?;
        Ok(dsl::serialize(&result.program()))
    }
}

#[wasm_bindgen]
impl Predictor {
    #[wasm_bindgen(constructor)]
    pub fn new(weights: &[u8]) -> Result<Predictor, JsError> {
        Predictor::load(weights).map_err(|e| JsError::new(&e))
    }

    /// Predicts a program for an RGBA screenshot; `beam` 1 is greedy.
    pub fn predict(&self, rgba: &[u8], size: u32, beam: usize) -> Result<String, JsError> {
        self.run(rgba, size, beam).map_err(|e| JsError::new(&e))
    }
}
