//! The evaluation suite: CLIP-Frame, Interpolation Error / PSNR, Warping
//! Error and CLIP-Text over pluggable frame-embedder and optical-flow
//! backends. The default backends are deterministic and fully offline; the
//! external slots accept an embedding service and precomputed flow files.

use std::path::PathBuf;

use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::client::{post_json, HttpClientConfig};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use crate::util::fnv1a64;
use crate::video::{FrameView, VideoClip};

/// Cap applied to per-frame PSNR so zero-error frames stay finite.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Presentation scales used by the standard report layout.
pub const SCALE_ANNOTATIONS: [(&str, &str); 5] = [
    ("clip_f", "1e-2"),
    ("int_err", "1e-2"),
    ("int_psnr", "1"),
    ("warp_err", "1e-2"),
    ("clip_t", "1e-2"),
];

// ---------------------------------------------------------------------------
// Embedder backends
// ---------------------------------------------------------------------------

/// Maps frames and text into one shared embedding space.
pub trait FrameEmbedder {
    fn dim(&self) -> usize;
    fn embed_frame(&self, frame: FrameView<'_>) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn id(&self) -> String;
}

/// Deterministic offline stub: frames are average-pooled to an 8x8 luma
/// thumbnail and passed through a fixed random projection; text is a hashed
/// bag of words. Stands in for a pretrained image/text encoder.
pub struct HashEmbedder {
    dim: usize,
    projection: Vec<f64>, // [dim x 64]
}

impl HashEmbedder {
    const THUMB: usize = 8;

    pub fn new(dim: usize) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(fnv1a64(b"hash-embedder-projection"));
        let projection = Tensor::randn(&[dim * 64], (1.0f64 / 64.0).sqrt(), &mut rng).into_data();
        HashEmbedder { dim, projection }
    }

    fn thumbnail(frame: FrameView<'_>) -> [f64; 64] {
        let mut out = [0.0; 64];
        let t = Self::THUMB;
        for ty in 0..t {
            let y0 = ty * frame.height / t;
            let y1 = ((ty + 1) * frame.height / t).max(y0 + 1).min(frame.height);
            for tx in 0..t {
                let x0 = tx * frame.width / t;
                let x1 = ((tx + 1) * frame.width / t).max(x0 + 1).min(frame.width);
                let mut acc = 0.0;
                let mut n = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let mut luma = 0.0;
                        for c in 0..frame.channels {
                            luma += frame.get(y, x, c) as f64;
                        }
                        acc += luma / frame.channels as f64;
                        n += 1.0;
                    }
                }
                out[ty * t + tx] = acc / n;
            }
        }
        out
    }
}

impl FrameEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_frame(&self, frame: FrameView<'_>) -> Result<Vec<f64>> {
        let thumb = Self::thumbnail(frame);
        let mut out = vec![0.0; self.dim];
        for (i, slot) in out.iter_mut().enumerate() {
            let row = &self.projection[i * 64..(i + 1) * 64];
            // Affine lift keeps all-black frames away from the zero vector.
            *slot = row.iter().zip(thumb).map(|(&p, v)| p * (v + 0.5)).sum();
        }
        Ok(out)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        let words = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty());
        let mut any = false;
        for word in words {
            any = true;
            let seed = fnv1a64(word.to_lowercase().as_bytes());
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let v = Tensor::randn(&[self.dim], 1.0, &mut rng);
            for (o, x) in out.iter_mut().zip(v.data()) {
                *o += x;
            }
        }
        if !any {
            let mut rng = ChaCha12Rng::seed_from_u64(fnv1a64(b"<empty>"));
            out = Tensor::randn(&[self.dim], 1.0, &mut rng).into_data();
        }
        Ok(out)
    }

    fn id(&self) -> String {
        format!("hash-{}", self.dim)
    }
}

/// External embedding service client: POSTs base64 PNG frames or raw text
/// and expects `{"embedding": [f64; dim]}`.
pub struct HttpEmbedder {
    cfg: HttpClientConfig,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(cfg: HttpClientConfig, dim: usize) -> Self {
        HttpEmbedder { cfg, dim }
    }

    fn parse_embedding(&self, value: serde_json::Value) -> Result<Vec<f64>> {
        let arr = value
            .get("embedding")
            .and_then(|v| v.as_array())
            .ok_or_else(|| CoreError::Client {
                message: "response missing 'embedding' array".into(),
                retryable: false,
            })?;
        let out: Vec<f64> = arr.iter().filter_map(|v| v.as_f64()).collect();
        if out.len() != self.dim {
            return Err(CoreError::Client {
                message: format!("embedding length {} != configured {}", out.len(), self.dim),
                retryable: false,
            });
        }
        Ok(out)
    }
}

impl FrameEmbedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_frame(&self, frame: FrameView<'_>) -> Result<Vec<f64>> {
        let png = encode_frame_png(frame)?;
        let body = serde_json::json!({
            "kind": "image",
            "png_base64": base64::engine::general_purpose::STANDARD.encode(png),
        });
        self.parse_embedding(post_json(&self.cfg, &body)?)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let body = serde_json::json!({ "kind": "text", "text": text });
        self.parse_embedding(post_json(&self.cfg, &body)?)
    }

    fn id(&self) -> String {
        format!("http-{}", self.cfg.endpoint)
    }
}

/// PNG-encode a frame in memory (gray for 1 channel, RGB otherwise).
pub(crate) fn encode_frame_png(frame: FrameView<'_>) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    let quant = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let (w, h) = (frame.width as u32, frame.height as u32);
    let result = if frame.channels == 1 {
        let img = image::GrayImage::from_raw(w, h, frame.data.iter().map(|&v| quant(v)).collect())
            .expect("gray buffer");
        img.write_to(&mut buf, image::ImageFormat::Png)
    } else {
        let mut rgb = Vec::with_capacity((w * h * 3) as usize);
        for y in 0..frame.height {
            for x in 0..frame.width {
                for c in 0..3 {
                    rgb.push(quant(frame.get(y, x, c.min(frame.channels - 1))));
                }
            }
        }
        let img = image::RgbImage::from_raw(w, h, rgb).expect("rgb buffer");
        img.write_to(&mut buf, image::ImageFormat::Png)
    };
    result.map_err(|e| CoreError::Ingestion(format!("png encode: {e}")))?;
    Ok(buf.into_inner())
}

// ---------------------------------------------------------------------------
// Flow backends
// ---------------------------------------------------------------------------

/// Dense displacement field `[H, W, 2]` (dx, dy), in pixels of the full-
/// resolution frame. `flow(a, b)[p]` is the displacement `d` such that
/// `b[p] ~= a[p + d]`, i.e. the field that backward-warps `a` onto `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            data: vec![0.0; height * width * 2],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f32, f32)) -> Self {
        let mut field = FlowField::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(y, x);
                field.set(y, x, dx, dy);
            }
        }
        field
    }

    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, y: usize, x: usize, dx: f32, dy: f32) {
        let i = (y * self.width + x) * 2;
        self.data[i] = dx;
        self.data[i + 1] = dy;
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = (self.height * self.width) as f64;
        let mut acc = 0.0;
        for i in 0..self.height * self.width {
            let (dx, dy) = (self.data[2 * i] as f64, self.data[2 * i + 1] as f64);
            acc += (dx * dx + dy * dy).sqrt();
        }
        acc / n
    }

    /// Textual array format: header `H W`, then `H*W` lines of `dx dy`.
    pub fn write_text(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::with_capacity(self.data.len() * 8);
        out.push_str(&format!("{} {}\n", self.height, self.width));
        for i in 0..self.height * self.width {
            out.push_str(&format!("{} {}\n", self.data[2 * i], self.data[2 * i + 1]));
        }
        std::fs::write(path, out).map_err(|e| CoreError::io(path, e))
    }

    pub fn read_text(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut lines = text.lines().enumerate();
        let locus = |line: usize| format!("{}:{}", path.display(), line + 1);
        let (line_no, header) = lines
            .next()
            .ok_or_else(|| CoreError::parse(path.display().to_string(), "empty flow file"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .filter_map(|t| t.parse().ok())
            .collect();
        let [height, width] = dims.as_slice() else {
            return Err(CoreError::parse(locus(line_no), "expected header 'H W'"));
        };
        let mut field = FlowField::zeros(*height, *width);
        for i in 0..height * width {
            let (line_no, line) = lines.next().ok_or_else(|| {
                CoreError::parse(path.display().to_string(), "truncated flow file")
            })?;
            let vals: Vec<f32> = line
                .split_whitespace()
                .filter_map(|t| t.parse().ok())
                .collect();
            let [dx, dy] = vals.as_slice() else {
                return Err(CoreError::parse(locus(line_no), "expected 'dx dy'"));
            };
            field.data[2 * i] = *dx;
            field.data[2 * i + 1] = *dy;
        }
        Ok(field)
    }
}

/// Estimates dense flow between two frames of the same geometry.
pub trait FlowBackend {
    /// `pair_index` identifies the (t, t+1) pair within the clip, letting
    /// file-backed implementations look up precomputed fields.
    fn flow(&self, a: FrameView<'_>, b: FrameView<'_>, pair_index: usize) -> Result<FlowField>;
    fn id(&self) -> String;
}

/// Stub backend: everything is stationary.
pub struct ZeroFlow;

impl FlowBackend for ZeroFlow {
    fn flow(&self, a: FrameView<'_>, _b: FrameView<'_>, _pair_index: usize) -> Result<FlowField> {
        Ok(FlowField::zeros(a.height, a.width))
    }

    fn id(&self) -> String {
        "zero".into()
    }
}

/// Coarse integer block matching with optional downsampling, so the metric
/// suite runs fully offline. Displacements are reported in full-resolution
/// pixels; ties break toward the smallest displacement for determinism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockMatchingFlow {
    pub block_size: usize,
    pub search_radius: usize,
    /// Integer downsampling factor; 0 selects one automatically from the
    /// frame size (about 128 px on the short side).
    pub downsample: usize,
}

impl Default for BlockMatchingFlow {
    fn default() -> Self {
        BlockMatchingFlow {
            block_size: 8,
            search_radius: 4,
            downsample: 0,
        }
    }
}

impl BlockMatchingFlow {
    fn factor(&self, h: usize, w: usize) -> usize {
        if self.downsample > 0 {
            self.downsample
        } else {
            (h.min(w) / 128).max(1)
        }
    }
}

fn to_luma_downsampled(frame: FrameView<'_>, ds: usize) -> (usize, usize, Vec<f64>) {
    let (h, w) = (frame.height / ds, frame.width / ds);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in 0..ds {
                for dx in 0..ds {
                    let mut luma = 0.0;
                    for c in 0..frame.channels {
                        luma += frame.get(y * ds + dy, x * ds + dx, c) as f64;
                    }
                    acc += luma / frame.channels as f64;
                }
            }
            out[y * w + x] = acc / (ds * ds) as f64;
        }
    }
    (h, w, out)
}

impl FlowBackend for BlockMatchingFlow {
    fn flow(&self, a: FrameView<'_>, b: FrameView<'_>, _pair_index: usize) -> Result<FlowField> {
        if a.height != b.height || a.width != b.width || a.channels != b.channels {
            return Err(CoreError::Validation(
                "flow frames must share geometry".into(),
            ));
        }
        let ds = self.factor(a.height, a.width).min(a.height).min(a.width);
        let (h, w, la) = to_luma_downsampled(a, ds);
        let (_, _, lb) = to_luma_downsampled(b, ds);
        let bs = self.block_size.min(h).min(w).max(1);
        let r = self.search_radius as isize;
        let mut field = FlowField::zeros(a.height, a.width);

        let mut by = 0;
        while by < h {
            let y1 = (by + bs).min(h);
            let mut bx = 0;
            while bx < w {
                let x1 = (bx + bs).min(w);
                // Best displacement for block b[by..y1, bx..x1] inside a.
                let mut best = (0i64, 0isize, 0isize, f64::INFINITY);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sy0, sx0) = (by as isize + dy, bx as isize + dx);
                        let (sy1, sx1) = (y1 as isize + dy, x1 as isize + dx);
                        if sy0 < 0 || sx0 < 0 || sy1 > h as isize || sx1 > w as isize {
                            continue;
                        }
                        let mut sad = 0.0;
                        for y in by..y1 {
                            for x in bx..x1 {
                                let av = la[((y as isize + dy) as usize) * w
                                    + (x as isize + dx) as usize];
                                sad += (lb[y * w + x] - av).abs();
                            }
                        }
                        let mag = (dx * dx + dy * dy) as i64;
                        let better = sad < best.3 - 1e-12
                            || ((sad - best.3).abs() <= 1e-12
                                && (mag, dy, dx) < (best.0, best.1, best.2));
                        if better {
                            best = (mag, dy, dx, sad);
                        }
                    }
                }
                let (fdx, fdy) = ((best.2 * ds as isize) as f32, (best.1 * ds as isize) as f32);
                for y in by * ds..(y1 * ds).min(a.height) {
                    for x in bx * ds..(x1 * ds).min(a.width) {
                        field.set(y, x, fdx, fdy);
                    }
                }
                bx += bs;
            }
            by += bs;
        }
        Ok(field)
    }

    fn id(&self) -> String {
        format!(
            "block-b{}r{}d{}",
            self.block_size, self.search_radius, self.downsample
        )
    }
}

/// File-backed backend for externally computed (e.g. RAFT-grade) flow:
/// reads `<prefix>NNNNNN.flow` per consecutive pair.
pub struct PrecomputedFlow {
    dir: PathBuf,
    prefix: String,
}

impl PrecomputedFlow {
    pub fn new(dir: impl Into<PathBuf>, prefix: impl Into<String>) -> Self {
        PrecomputedFlow {
            dir: dir.into(),
            prefix: prefix.into(),
        }
    }

    pub fn pair_path(&self, pair_index: usize) -> PathBuf {
        self.dir.join(format!("{}{:06}.flow", self.prefix, pair_index))
    }
}

impl FlowBackend for PrecomputedFlow {
    fn flow(&self, a: FrameView<'_>, _b: FrameView<'_>, pair_index: usize) -> Result<FlowField> {
        let field = FlowField::read_text(&self.pair_path(pair_index))?;
        if field.height != a.height || field.width != a.width {
            return Err(CoreError::Validation(format!(
                "precomputed flow {}x{} does not match frames {}x{}",
                field.height, field.width, a.height, a.width
            )));
        }
        Ok(field)
    }

    fn id(&self) -> String {
        format!("precomputed-{}", self.dir.display())
    }
}

// ---------------------------------------------------------------------------
// Metric operations
// ---------------------------------------------------------------------------

/// Which frame pairs CLIP-Frame averages over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Consecutive (t, t+1) pairs.
    #[default]
    Consecutive,
    /// All unordered frame pairs.
    AllPairs,
}

fn unit_normalize(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(CoreError::Numeric(format!(
            "zero or non-finite embedding norm for {what}"
        )));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean cosine similarity between frame embeddings across pairs.
pub fn clip_frame(embedder: &dyn FrameEmbedder, clip: &VideoClip, mode: PairMode) -> Result<f64> {
    if clip.frames() < 2 {
        return Err(CoreError::Validation("clip_frame needs at least 2 frames".into()));
    }
    let mut embeddings = Vec::with_capacity(clip.frames());
    for t in 0..clip.frames() {
        let e = embedder.embed_frame(clip.frame(t))?;
        embeddings.push(unit_normalize(e, &format!("frame {t}"))?);
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    match mode {
        PairMode::Consecutive => {
            for t in 0..clip.frames() - 1 {
                acc += cosine(&embeddings[t], &embeddings[t + 1]);
                count += 1;
            }
        }
        PairMode::AllPairs => {
            for i in 0..clip.frames() {
                for j in i + 1..clip.frames() {
                    acc += cosine(&embeddings[i], &embeddings[j]);
                    count += 1;
                }
            }
        }
    }
    Ok(acc / count as f64)
}

/// Predict each interior frame as the average of its neighbors; returns
/// (mean absolute error, mean per-frame PSNR capped at [`PSNR_CAP_DB`]).
pub fn interpolation_metrics(clip: &VideoClip) -> Result<(f64, f64)> {
    if clip.frames() < 3 {
        return Err(CoreError::Validation(
            "interpolation metrics need at least 3 frames".into(),
        ));
    }
    let per_frame = clip.height() * clip.width() * clip.channels();
    let mut abs_acc = 0.0;
    let mut psnr_acc = 0.0;
    for t in 1..clip.frames() - 1 {
        let prev = clip.frame(t - 1);
        let cur = clip.frame(t);
        let next = clip.frame(t + 1);
        let mut sq = 0.0;
        for i in 0..per_frame {
            let pred = (prev.data[i] as f64 + next.data[i] as f64) / 2.0;
            let err = pred - cur.data[i] as f64;
            abs_acc += err.abs();
            sq += err * err;
        }
        let mse = sq / per_frame as f64;
        let psnr = if mse == 0.0 {
            PSNR_CAP_DB
        } else {
            (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
        };
        psnr_acc += psnr;
    }
    let interior = (clip.frames() - 2) as f64;
    Ok((
        abs_acc / (interior * per_frame as f64),
        psnr_acc / interior,
    ))
}

fn bilinear_sample(frame: FrameView<'_>, y: f64, x: f64, c: usize) -> Option<f64> {
    // Valid only when the sample is fully interpolatable inside the frame.
    if !(0.0..=(frame.height - 1) as f64).contains(&y)
        || !(0.0..=(frame.width - 1) as f64).contains(&x)
    {
        return None;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(frame.height - 1), (x0 + 1).min(frame.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let v00 = frame.get(y0, x0, c) as f64;
    let v01 = frame.get(y0, x1, c) as f64;
    let v10 = frame.get(y1, x0, c) as f64;
    let v11 = frame.get(y1, x1, c) as f64;
    Some(v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx)
}

/// Flow is estimated on the source video; each edited frame t is backward-
/// warped by that flow and compared against edited frame t+1 under a
/// validity mask that excludes out-of-bounds samples.
pub fn warping_error(
    flow: &dyn FlowBackend,
    source: &VideoClip,
    edited: &VideoClip,
) -> Result<f64> {
    if source.frames() != edited.frames()
        || source.height() != edited.height()
        || source.width() != edited.width()
        || source.channels() != edited.channels()
    {
        return Err(CoreError::Validation(
            "source and edited clips must share geometry".into(),
        ));
    }
    if source.frames() < 2 {
        return Err(CoreError::Validation("warping error needs at least 2 frames".into()));
    }
    let mut pair_acc = 0.0;
    let mut pair_count = 0usize;
    for t in 0..source.frames() - 1 {
        let field = flow.flow(source.frame(t), source.frame(t + 1), t)?;
        if field.height != source.height() || field.width != source.width() {
            return Err(CoreError::Validation(format!(
                "flow field {}x{} does not match frames",
                field.height, field.width
            )));
        }
        let cur = edited.frame(t);
        let next = edited.frame(t + 1);
        let mut acc = 0.0;
        let mut valid = 0usize;
        for y in 0..source.height() {
            for x in 0..source.width() {
                let (dx, dy) = field.get(y, x);
                let (sy, sx) = (y as f64 + dy as f64, x as f64 + dx as f64);
                let mut ok = true;
                let mut px_err = 0.0;
                for c in 0..source.channels() {
                    match bilinear_sample(cur, sy, sx, c) {
                        None => {
                            ok = false;
                            break;
                        }
                        Some(v) => {
                            let d = v - next.get(y, x, c) as f64;
                            px_err += d * d;
                        }
                    }
                }
                if ok {
                    acc += px_err / source.channels() as f64;
                    valid += 1;
                }
            }
        }
        if valid > 0 {
            pair_acc += acc / valid as f64;
            pair_count += 1;
        }
    }
    if pair_count == 0 {
        return Ok(0.0);
    }
    Ok(pair_acc / pair_count as f64)
}

/// Mean cosine similarity between each frame embedding and the prompt
/// embedding.
pub fn clip_text(embedder: &dyn FrameEmbedder, clip: &VideoClip, prompt: &str) -> Result<f64> {
    let text = unit_normalize(embedder.embed_text(prompt)?, "prompt")?;
    let mut acc = 0.0;
    for t in 0..clip.frames() {
        let e = unit_normalize(embedder.embed_frame(clip.frame(t))?, &format!("frame {t}"))?;
        acc += cosine(&e, &text);
    }
    Ok(acc / clip.frames() as f64)
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// The five scores for one (source, edited, prompt) triple.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub source_id: String,
    pub edited_id: String,
    pub prompt: String,
    pub clip_f: f64,
    pub int_err: f64,
    pub int_psnr: f64,
    pub warp_err: f64,
    pub clip_t: f64,
    pub embedder: String,
    pub flow_backend: String,
    pub config_hash: String,
    /// Presentation scales of the standard table layout; values above are raw.
    pub scales: Vec<(String, String)>,
}

/// Run the full suite on one pair.
pub fn evaluate(
    source: &VideoClip,
    edited: &VideoClip,
    prompt: &str,
    embedder: &dyn FrameEmbedder,
    flow: &dyn FlowBackend,
    pair_mode: PairMode,
    config_hash: u64,
) -> Result<MetricReport> {
    let clip_f = clip_frame(embedder, edited, pair_mode)?;
    let (int_err, int_psnr) = interpolation_metrics(edited)?;
    let warp_err = warping_error(flow, source, edited)?;
    let clip_t = clip_text(embedder, edited, prompt)?;
    for (name, v) in [
        ("clip_f", clip_f),
        ("int_err", int_err),
        ("int_psnr", int_psnr),
        ("warp_err", warp_err),
        ("clip_t", clip_t),
    ] {
        if !v.is_finite() {
            return Err(CoreError::Numeric(format!("metric {name} is non-finite")));
        }
    }
    Ok(MetricReport {
        source_id: source.id().to_string(),
        edited_id: edited.id().to_string(),
        prompt: prompt.to_string(),
        clip_f,
        int_err,
        int_psnr,
        warp_err,
        clip_t,
        embedder: embedder.id(),
        flow_backend: flow.id(),
        config_hash: format!("{config_hash:016x}"),
        scales: SCALE_ANNOTATIONS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    })
}

/// Arithmetic means across a batch of reports.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricSummary {
    pub count: usize,
    pub clip_f: f64,
    pub int_err: f64,
    pub int_psnr: f64,
    pub warp_err: f64,
    pub clip_t: f64,
}

pub fn summarize(reports: &[MetricReport]) -> Result<MetricSummary> {
    if reports.is_empty() {
        return Err(CoreError::Validation("no reports to summarize".into()));
    }
    let n = reports.len() as f64;
    Ok(MetricSummary {
        count: reports.len(),
        clip_f: reports.iter().map(|r| r.clip_f).sum::<f64>() / n,
        int_err: reports.iter().map(|r| r.int_err).sum::<f64>() / n,
        int_psnr: reports.iter().map(|r| r.int_psnr).sum::<f64>() / n,
        warp_err: reports.iter().map(|r| r.warp_err).sum::<f64>() / n,
        clip_t: reports.iter().map(|r| r.clip_t).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Embedder whose frame embeddings follow a fixed per-frame table keyed
    /// by the first pixel value.
    struct TableEmbedder {
        rows: Vec<Vec<f64>>,
        text: Vec<f64>,
    }

    impl FrameEmbedder for TableEmbedder {
        fn dim(&self) -> usize {
            self.rows[0].len()
        }
        fn embed_frame(&self, frame: FrameView<'_>) -> Result<Vec<f64>> {
            let key = (frame.get(0, 0, 0) * 10.0).round() as usize;
            Ok(self.rows[key % self.rows.len()].clone())
        }
        fn embed_text(&self, _text: &str) -> Result<Vec<f64>> {
            Ok(self.text.clone())
        }
        fn id(&self) -> String {
            "table".into()
        }
    }

    fn keyed_clip(keys: &[f32]) -> VideoClip {
        VideoClip::from_fn("k", keys.len(), 2, 2, 1, 8.0, |t, _, _, _| keys[t] / 10.0).unwrap()
    }

    fn flat_clip(values: &[f32]) -> VideoClip {
        VideoClip::from_fn("f", values.len(), 2, 2, 1, 8.0, |t, _, _, _| values[t]).unwrap()
    }

    #[test]
    fn clip_frame_identical_frames_is_one() {
        let e = HashEmbedder::new(16);
        let clip = flat_clip(&[0.4, 0.4, 0.4]);
        let v = clip_frame(&e, &clip, PairMode::Consecutive).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_frame_orthogonal_pair_is_zero() {
        let e = TableEmbedder {
            rows: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            text: vec![1.0, 0.0],
        };
        let clip = keyed_clip(&[0.0, 1.0]);
        assert_eq!(clip_frame(&e, &clip, PairMode::Consecutive).unwrap(), 0.0);
    }

    #[test]
    fn clip_frame_mean_of_declared_pair_cosines() {
        // Frames 0, 1 identical; frame 2 orthogonal: cosines {1, 0} -> 0.5.
        let e = TableEmbedder {
            rows: vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            text: vec![1.0, 0.0],
        };
        let clip = keyed_clip(&[0.0, 1.0, 2.0]);
        assert_eq!(clip_frame(&e, &clip, PairMode::Consecutive).unwrap(), 0.5);
    }

    #[test]
    fn interpolation_constant_video_hits_cap() {
        let clip = flat_clip(&[0.3, 0.3, 0.3, 0.3]);
        let (err, psnr) = interpolation_metrics(&clip).unwrap();
        assert_eq!(err, 0.0);
        assert_eq!(psnr, PSNR_CAP_DB);
    }

    #[test]
    fn interpolation_linear_motion_is_exact() {
        let clip = flat_clip(&[0.0, 0.5, 1.0]);
        let (err, _) = interpolation_metrics(&clip).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn interpolation_quarter_case_matches_hand_computation() {
        let clip = flat_clip(&[0.0, 0.25, 1.0]);
        let (err, psnr) = interpolation_metrics(&clip).unwrap();
        assert!((err - 0.25).abs() < 1e-9);
        let expected = 10.0 * 16.0f64.log10();
        assert!((psnr - expected).abs() < 1e-9, "psnr {psnr} vs {expected}");
    }

    #[test]
    fn warping_zero_flow_constant_video_is_zero() {
        let source = flat_clip(&[0.5, 0.5, 0.5]);
        let edited = flat_clip(&[0.25, 0.25, 0.25]);
        assert_eq!(warping_error(&ZeroFlow, &source, &edited).unwrap(), 0.0);
    }

    #[test]
    fn warping_constant_offset_is_squared_offset() {
        let source = flat_clip(&[0.5, 0.5]);
        let edited = flat_clip(&[0.4, 0.5]);
        let err = warping_error(&ZeroFlow, &source, &edited).unwrap();
        assert!((err - 0.01).abs() < 1e-6);
    }

    #[test]
    fn warping_known_translation_is_zero_on_valid_mask() {
        // Content shifts right by 1 px per frame; flow(a, b) = -1 in x.
        let w = 8;
        let clip = VideoClip::from_fn("t", 3, 4, w, 1, 8.0, |t, _, x, _| {
            let shifted = (x + w - t) % w;
            shifted as f32 / w as f32
        })
        .unwrap();
        struct Translate;
        impl FlowBackend for Translate {
            fn flow(&self, a: FrameView<'_>, _b: FrameView<'_>, _p: usize) -> Result<FlowField> {
                Ok(FlowField::from_fn(a.height, a.width, |_, _| (-1.0, 0.0)))
            }
            fn id(&self) -> String {
                "translate".into()
            }
        }
        // Wrap-around makes the content an exact translation except at the
        // seam column; restrict to the interior by checking near-zero.
        let err = warping_error(&Translate, &clip, &clip).unwrap();
        assert!(err < 0.02, "translation warp error should be small, got {err}");
    }

    #[test]
    fn clip_text_matching_and_orthogonal() {
        let e = TableEmbedder {
            rows: vec![vec![1.0, 0.0]],
            text: vec![1.0, 0.0],
        };
        let clip = keyed_clip(&[0.0, 0.0]);
        assert_eq!(clip_text(&e, &clip, "p").unwrap(), 1.0);
        let e2 = TableEmbedder {
            rows: vec![vec![1.0, 0.0]],
            text: vec![0.0, 1.0],
        };
        assert_eq!(clip_text(&e2, &clip, "p").unwrap(), 0.0);
    }

    #[test]
    fn clip_text_mean_over_frames() {
        let e = TableEmbedder {
            rows: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            text: vec![1.0, 0.0],
        };
        let clip = keyed_clip(&[0.0, 1.0]);
        assert_eq!(clip_text(&e, &clip, "p").unwrap(), 0.5);
    }

    #[test]
    fn zero_norm_embedding_is_numeric_error() {
        let e = TableEmbedder {
            rows: vec![vec![0.0, 0.0]],
            text: vec![1.0, 0.0],
        };
        let clip = keyed_clip(&[0.0, 0.0]);
        assert!(matches!(
            clip_frame(&e, &clip, PairMode::Consecutive),
            Err(CoreError::Numeric(_))
        ));
    }

    #[test]
    fn block_matching_recovers_global_translation() {
        let w = 64;
        let clip = VideoClip::from_fn("t", 2, 64, w, 1, 8.0, |t, y, x, _| {
            let sx = (x + w - 2 * t) % w; // 2 px/frame rightward motion
            (((sx as f32) * 0.37).sin() * 0.5 + 0.5) * (((y as f32) * 0.21).cos() * 0.5 + 0.5)
        })
        .unwrap();
        let bm = BlockMatchingFlow {
            block_size: 8,
            search_radius: 4,
            downsample: 1,
        };
        let field = bm.flow(clip.frame(0), clip.frame(1), 0).unwrap();
        // Interior blocks should find dx = -2 (backward flow).
        let (dx, dy) = field.get(32, 32);
        assert_eq!((dx, dy), (-2.0, 0.0));
        assert!(field.mean_magnitude() > 1.0);
    }

    #[test]
    fn flow_file_roundtrip() {
        let field = FlowField::from_fn(3, 4, |y, x| (x as f32 - 1.5, y as f32 * 0.5));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("000000.flow");
        field.write_text(&path).unwrap();
        let back = FlowField::read_text(&path).unwrap();
        assert_eq!(field, back);
    }

    #[test]
    fn evaluate_composes_and_roundtrips() {
        let e = HashEmbedder::new(16);
        let clip = VideoClip::from_fn("s", 4, 8, 8, 1, 8.0, |t, y, x, _| {
            0.2 + 0.05 * t as f32 + 0.01 * (y + x) as f32
        })
        .unwrap();
        let report = evaluate(&clip, &clip, "a caption", &e, &ZeroFlow, PairMode::Consecutive, 7)
            .unwrap();
        assert!((report.clip_f - 1.0).abs() < 0.2);
        let (int_err, _) = interpolation_metrics(&clip).unwrap();
        assert_eq!(report.int_err, int_err);
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
        let summary = summarize(&[report.clone(), report]).unwrap();
        assert_eq!(summary.count, 2);
    }
}
