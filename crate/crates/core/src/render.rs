//! Deterministic rasterizer for layout programs, plus an HTML emitter and
//! the binary PPM/PGM codecs used for screenshots and attention maps.

use std::fmt::Write as _;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::dsl::{ContainerTag, LeafTag, Node, ProgramAst};

/// Inset applied to every leaf rectangle.
pub const MARGIN: u32 = 2;
/// Smallest leaf rectangle (after the margin) the layout accepts.
pub const MIN_LEAF: u32 = 4;
pub const MIN_IMAGE: u32 = 16;

const WHITE: [u8; 3] = [255, 255, 255];
const BLACK: [u8; 3] = [0, 0, 0];

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("layout too small: {0}")]
    TooSmall(String),
    #[error("bad PPM/PGM data: {0}")]
    PpmFormat(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn color(tag: LeafTag) -> [u8; 3] {
    match tag {
        LeafTag::Label => [200, 200, 200],
        LeafTag::Btn => [66, 133, 244],
        LeafTag::Switch => [52, 168, 83],
        LeafTag::Slider => [251, 188, 5],
        LeafTag::Img => [234, 67, 53],
        LeafTag::Text => [156, 39, 176],
        LeafTag::Check => [0, 172, 193],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.right()
            && other.x < self.right()
            && self.y < other.bottom()
            && other.y < self.bottom()
    }
}

/// RGB raster, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32, fill: [u8; 3]) -> Self {
        let data = fill.iter().copied().cycle().take((width * height * 3) as usize).collect();
        Image { width, height, data }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self, RenderError> {
        if data.len() != (width as usize) * (height as usize) * 3 {
            return Err(RenderError::PpmFormat(format!(
                "{}x{} image needs {} bytes, got {}",
                width,
                height,
                width as usize * height as usize * 3,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn fill_rect(&mut self, r: Rect, rgb: [u8; 3]) {
        for y in r.y..r.bottom().min(self.height) {
            for x in r.x..r.right().min(self.width) {
                self.set_pixel(x, y, rgb);
            }
        }
    }

    /// RGBA copy, for canvas APIs.
    pub fn to_rgba(&self) -> Vec<u8> {
        self.data
            .chunks_exact(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect()
    }

    pub fn write_ppm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.data)
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.data.len() + 20);
        self.write_ppm(&mut buf).expect("writing to a Vec");
        buf
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<(), RenderError> {
        std::fs::write(path, self.to_ppm_bytes())?;
        Ok(())
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self, RenderError> {
        let (header, offset) = read_pnm_header(bytes, b"P6")?;
        let [width, height] = header;
        let need = width as usize * height as usize * 3;
        let payload = bytes
            .get(offset..offset + need)
            .ok_or_else(|| RenderError::PpmFormat(format!("truncated pixel data, need {need} bytes")))?;
        Image::from_raw(width, height, payload.to_vec())
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self, RenderError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_ppm_bytes(&bytes)
    }
}

/// Parses `magic w h maxval` and returns the dimensions and payload offset.
fn read_pnm_header(bytes: &[u8], magic: &[u8]) -> Result<([u32; 2], usize), RenderError> {
    if !bytes.starts_with(magic) {
        return Err(RenderError::PpmFormat(format!(
            "missing magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = magic.len();
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and `#` comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| RenderError::PpmFormat("bad header field".into()))?;
    }
    if fields[2] != 255 {
        return Err(RenderError::PpmFormat(format!("maxval {} unsupported", fields[2])));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(RenderError::PpmFormat("missing whitespace after header".into()));
    }
    Ok(([fields[0], fields[1]], pos + 1))
}

/// Binary PGM (`P5`) encoding of an 8-bit gray raster.
pub fn pgm_bytes(width: u32, height: u32, gray: &[u8]) -> Vec<u8> {
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(gray);
    buf
}

pub fn parse_pgm(bytes: &[u8]) -> Result<(u32, u32, Vec<u8>), RenderError> {
    let ([w, h], offset) = read_pnm_header(bytes, b"P5")?;
    let need = (w * h) as usize;
    let payload = bytes
        .get(offset..offset + need)
        .ok_or_else(|| RenderError::PpmFormat("truncated PGM".into()))?;
    Ok((w, h, payload.to_vec()))
}

/// Splits `total` into `n` parts; the last part takes the remainder.
fn split(total: u32, n: usize) -> impl Iterator<Item = (u32, u32)> {
    let n = n as u32;
    let base = total / n.max(1);
    (0..n).map(move |i| {
        let len = if i + 1 == n { total - base * i } else { base };
        (base * i, len)
    })
}

fn layout_node(node: &Node, area: Rect, out: &mut Vec<(LeafTag, Rect)>) -> Result<(), RenderError> {
    match node {
        Node::Leaf(tag) => {
            if area.w < 2 * MARGIN + MIN_LEAF || area.h < 2 * MARGIN + MIN_LEAF {
                return Err(RenderError::TooSmall(format!(
                    "{} gets {}x{} px, needs at least {}x{} before margins",
                    tag.name(),
                    area.w,
                    area.h,
                    2 * MARGIN + MIN_LEAF,
                    2 * MARGIN + MIN_LEAF
                )));
            }
            let inner = Rect::new(area.x + MARGIN, area.y + MARGIN, area.w - 2 * MARGIN, area.h - 2 * MARGIN);
            out.push((*tag, inner));
            Ok(())
        }
        Node::Container { tag, children } => layout_children(*tag, children, area, out),
    }
}

fn layout_children(
    tag: ContainerTag,
    children: &[Node],
    area: Rect,
    out: &mut Vec<(LeafTag, Rect)>,
) -> Result<(), RenderError> {
    match tag {
        ContainerTag::Stack => {
            for (child, (off, len)) in children.iter().zip(split(area.h, children.len())) {
                layout_node(child, Rect::new(area.x, area.y + off, area.w, len), out)?;
            }
        }
        ContainerTag::Row => {
            for (child, (off, len)) in children.iter().zip(split(area.w, children.len())) {
                layout_node(child, Rect::new(area.x + off, area.y, len, area.h), out)?;
            }
        }
    }
    Ok(())
}

/// Leaf rectangles in document order. Stacks split their area vertically,
/// rows horizontally.
pub fn layout(ast: &ProgramAst, width: u32, height: u32) -> Result<Vec<(LeafTag, Rect)>, RenderError> {
    if width < MIN_IMAGE || height < MIN_IMAGE {
        return Err(RenderError::TooSmall(format!(
            "image {width}x{height} is below {MIN_IMAGE}x{MIN_IMAGE}"
        )));
    }
    let mut out = Vec::new();
    layout_children(ContainerTag::Stack, ast.children(), Rect::new(0, 0, width, height), &mut out)?;
    Ok(out)
}

fn hline(img: &mut Image, x0: u32, x1: u32, y: u32, rgb: [u8; 3]) {
    for x in x0..x1 {
        img.set_pixel(x, y, rgb);
    }
}

fn draw_glyph(img: &mut Image, tag: LeafTag, r: Rect) {
    match tag {
        LeafTag::Btn => {
            hline(img, r.x, r.right(), r.y, BLACK);
            hline(img, r.x, r.right(), r.bottom() - 1, BLACK);
            for y in r.y..r.bottom() {
                img.set_pixel(r.x, y, BLACK);
                img.set_pixel(r.right() - 1, y, BLACK);
            }
        }
        LeafTag::Slider => {
            let y0 = r.y + (r.h - 2) / 2;
            img.fill_rect(Rect::new(r.x, y0, r.w, 2), BLACK);
        }
        LeafTag::Switch => img.fill_rect(Rect::new(r.x, r.y, r.w / 2, r.h), BLACK),
        LeafTag::Img => {
            let s = 4.min(r.w).min(r.h);
            for (x, y) in [
                (r.x, r.y),
                (r.right() - s, r.y),
                (r.x, r.bottom() - s),
                (r.right() - s, r.bottom() - s),
            ] {
                img.fill_rect(Rect::new(x, y, s, s), BLACK);
            }
        }
        LeafTag::Text => {
            for k in 1..=3 {
                hline(img, r.x, r.right(), r.y + r.h * k / 4, BLACK);
            }
        }
        LeafTag::Label => hline(img, r.x, r.right(), r.bottom() - 1, BLACK),
        LeafTag::Check => {
            let s = (r.w.min(r.h) / 2).max(2);
            let x0 = r.x + (r.w - s) / 2;
            let y0 = r.y + (r.h - s) / 2;
            for i in 0..s {
                img.set_pixel(x0 + i, y0 + i, BLACK);
                img.set_pixel(x0 + s - 1 - i, y0 + i, BLACK);
            }
        }
    }
}

/// Rasterizes a program: white background, one colored rectangle per leaf
/// with a black type glyph on top.
pub fn render(ast: &ProgramAst, width: u32, height: u32) -> Result<Image, RenderError> {
    let rects = layout(ast, width, height)?;
    let mut img = Image::new(width, height, WHITE);
    for (tag, r) in rects {
        img.fill_rect(r, color(tag));
        draw_glyph(&mut img, tag, r);
    }
    Ok(img)
}

fn html_node(node: &Node, depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    match node {
        Node::Leaf(tag) => {
            let _ = writeln!(out, "{pad}<div class=\"{}\"></div>", tag.name());
        }
        Node::Container { tag, children } => html_container(tag.name(), children, depth, out),
    }
}

fn html_container(class: &str, children: &[Node], depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    let _ = writeln!(out, "{pad}<div class=\"{class}\">");
    for child in children {
        html_node(child, depth + 1, out);
    }
    let _ = writeln!(out, "{pad}</div>");
}

/// Nested `<div>` markup mirroring the tree, two-space indented.
pub fn export_html(ast: &ProgramAst) -> String {
    let mut out = String::new();
    html_container("stack", ast.children(), 0, &mut out);
    out
}
