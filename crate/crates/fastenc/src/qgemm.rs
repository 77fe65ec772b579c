//! Dynamic 8-bit quantized matrix multiplication.
//!
//! Activations are quantized asymmetrically to u8 with a per-tensor range
//! chosen at call time; weights are quantized symmetrically to i8 with an
//! independent scale per output column. Weights are re-tiled into cache
//! blocked panels once per distinct weight and the packed form is memoized,
//! since repeated packing would cancel the win from the quantized product.
//!
//! Rounding is round-half-away-from-zero everywhere so quantized payloads are
//! bit-reproducible across platforms.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use once_cell::sync::OnceCell;

use thiserror::Error;

use crate::tensor::Matrix;

/// Default K-dimension panel height.
pub const DEFAULT_KC: usize = 256;
/// Default N-dimension panel width.
pub const DEFAULT_NC: usize = 64;

/// Largest supported inner dimension for `gemm_i8`. Each product
/// |(a-zp)*w| <= 255*127 fits in 15 bits; panels accumulate in i32 and panel
/// sums accumulate in i64, which is exact for any K up to this bound.
pub const MAX_K: usize = 1 << 24;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("non-finite element at index {0}")]
    NonFinite(usize),
    #[error("inner dimensions do not match: activations {m}x{k}, weight {k2}x{n}")]
    InnerDim { m: usize, k: usize, k2: usize, n: usize },
    #[error("bias length {got} does not match output columns {want}")]
    BiasLen { got: usize, want: usize },
    #[error("inner dimension {0} exceeds the supported bound {MAX_K}")]
    KTooLarge(usize),
    #[error("packing cache id {0:?} reused with a different payload")]
    SourceIdCollision(String),
}

/// Epilogue fused into the quantized GEMM output loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QEpilogue {
    None,
    Relu,
}

/// u8 activations with one dynamic affine range for the whole tensor:
/// real = (q - zero_point) * scale.
#[derive(Debug, Clone)]
pub struct ActQuant {
    pub values: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    pub scale: f32,
    pub zero_point: u8,
}

/// i8 weights with an independent symmetric scale per output column.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeight {
    pub values: Vec<i8>, // row-major K x N
    pub k: usize,
    pub n: usize,
    pub col_scales: Vec<f32>,
}

/// Cache-blocked panel layout. Panels are visited row-of-panels first, then
/// panel column; inside a panel each output column's KC values are contiguous
/// (column-major within the panel), so the inner dot product streams both
/// operands linearly.
#[derive(Debug, Clone)]
pub struct PackedWeight {
    pub source_id: String,
    pub payload: Vec<i8>,
    pub k: usize,
    pub n: usize,
    pub kc: usize,
    pub nc: usize,
    pub col_scales: Vec<f32>,
    checksum: u64,
}

fn round_half_away(v: f32) -> f32 {
    // f32::round rounds half away from zero, which is the fixed policy.
    v.round()
}

fn check_finite(data: &[f32]) -> Result<(), QuantError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(QuantError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Asymmetric u8 quantization of one activation tensor. The range is
/// [min(x), max(x)] widened to include 0 so that real 0.0 lands exactly on
/// the zero point. All-equal inputs fall back to scale 1.0.
pub fn quantize_activations_dynamic(x: &Matrix<f32>) -> Result<ActQuant, QuantError> {
    check_finite(x.data())?;
    let data = x.data();
    let (mut min, mut max) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in data {
        min = min.min(v);
        max = max.max(v);
    }
    if data.is_empty() {
        min = 0.0;
        max = 0.0;
    }
    let (scale, zero_point) = if min == max {
        // Degenerate range: encode round(c) offsets from the zero point.
        (1.0, round_half_away(-min.min(0.0)).clamp(0.0, 255.0) as u8)
    } else {
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let scale = (hi - lo) / 255.0;
        let zp = round_half_away(-lo / scale).clamp(0.0, 255.0) as u8;
        (scale, zp)
    };
    let values = data
        .iter()
        .map(|&v| (round_half_away(v / scale) + zero_point as f32).clamp(0.0, 255.0) as u8)
        .collect();
    Ok(ActQuant { values, rows: x.rows(), cols: x.cols(), scale, zero_point })
}

impl ActQuant {
    pub fn dequantize(&self) -> Matrix<f32> {
        let data = self
            .values
            .iter()
            .map(|&q| (q as i32 - self.zero_point as i32) as f32 * self.scale)
            .collect();
        Matrix::from_vec(self.rows, self.cols, data).unwrap()
    }
}

/// Symmetric i8 quantization with one scale per column:
/// scale_j = max|w[:,j]| / 127. All-zero columns get scale 1.0.
pub fn quantize_weight_per_column(w: &Matrix<f32>) -> Result<QuantizedWeight, QuantError> {
    check_finite(w.data())?;
    let (k, n) = (w.rows(), w.cols());
    let mut col_scales = vec![0.0f32; n];
    for r in 0..k {
        for (j, &v) in w.row(r).iter().enumerate() {
            col_scales[j] = col_scales[j].max(v.abs());
        }
    }
    for s in &mut col_scales {
        *s = if *s == 0.0 { 1.0 } else { *s / 127.0 };
    }
    let mut values = vec![0i8; k * n];
    for r in 0..k {
        for j in 0..n {
            let q = round_half_away(w.get(r, j) / col_scales[j]).clamp(-127.0, 127.0);
            values[r * n + j] = q as i8;
        }
    }
    Ok(QuantizedWeight { values, k, n, col_scales })
}

impl QuantizedWeight {
    pub fn dequantize(&self) -> Matrix<f32> {
        let mut data = Vec::with_capacity(self.k * self.n);
        for r in 0..self.k {
            for j in 0..self.n {
                data.push(self.values[r * self.n + j] as f32 * self.col_scales[j]);
            }
        }
        Matrix::from_vec(self.k, self.n, data).unwrap()
    }

    fn checksum(&self) -> u64 {
        // FNV-1a over the payload and shape; collision detection only.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut step = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        };
        for &d in &[self.k as u64, self.n as u64] {
            for b in d.to_le_bytes() {
                step(b);
            }
        }
        for &v in &self.values {
            step(v as u8);
        }
        for &s in &self.col_scales {
            for b in s.to_le_bytes() {
                step(b);
            }
        }
        h
    }
}

/// Tile a quantized weight into (kc x nc) panels.
fn pack_payload(wq: &QuantizedWeight, kc: usize, nc: usize) -> Vec<i8> {
    let mut payload = Vec::with_capacity(wq.k * wq.n);
    for k0 in (0..wq.k).step_by(kc) {
        let kb = kc.min(wq.k - k0);
        for n0 in (0..wq.n).step_by(nc) {
            let nb = nc.min(wq.n - n0);
            for j in 0..nb {
                for r in 0..kb {
                    payload.push(wq.values[(k0 + r) * wq.n + (n0 + j)]);
                }
            }
        }
    }
    payload
}

impl PackedWeight {
    /// Reconstruct the row-major quantized values. Round-trip is bit-exact.
    pub fn unpack(&self) -> QuantizedWeight {
        let mut values = vec![0i8; self.k * self.n];
        let mut idx = 0;
        for k0 in (0..self.k).step_by(self.kc) {
            let kb = self.kc.min(self.k - k0);
            for n0 in (0..self.n).step_by(self.nc) {
                let nb = self.nc.min(self.n - n0);
                for j in 0..nb {
                    for r in 0..kb {
                        values[(k0 + r) * self.n + (n0 + j)] = self.payload[idx];
                        idx += 1;
                    }
                }
            }
        }
        QuantizedWeight { values, k: self.k, n: self.n, col_scales: self.col_scales.clone() }
    }
}

/// Memoizing pack cache. Concurrent readers share packed weights; the first
/// caller for a given source id packs while later arrivals block on the same
/// cell and reuse the result.
#[derive(Debug)]
pub struct PackCache {
    entries: RwLock<HashMap<String, Arc<OnceCell<Arc<PackedWeight>>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
    // Serializes packers for distinct new ids only long enough to install
    // their cells; actual packing runs outside this lock.
    insert_lock: Mutex<()>,
    pub kc: usize,
    pub nc: usize,
}

impl Default for PackCache {
    fn default() -> Self {
        Self::new()
    }
}

impl PackCache {
    pub fn new() -> Self {
        Self::with_block_sizes(DEFAULT_KC, DEFAULT_NC)
    }

    pub fn with_block_sizes(kc: usize, nc: usize) -> Self {
        assert!(kc >= 1 && nc >= 1);
        PackCache {
            entries: RwLock::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            insert_lock: Mutex::new(()),
            kc,
            nc,
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    fn cell(&self, source_id: &str) -> Arc<OnceCell<Arc<PackedWeight>>> {
        if let Some(cell) = self.entries.read().unwrap().get(source_id) {
            return cell.clone();
        }
        let _guard = self.insert_lock.lock().unwrap();
        let mut map = self.entries.write().unwrap();
        map.entry(source_id.to_string()).or_default().clone()
    }

    /// Pack `wq` under `source_id`, or return the cached pack. Reusing an id
    /// for a different payload is an integrity error.
    pub fn pack_weight(
        &self,
        wq: &QuantizedWeight,
        source_id: &str,
    ) -> Result<Arc<PackedWeight>, QuantError> {
        let cell = self.cell(source_id);
        let mut packed_here = false;
        let packed = cell.get_or_init(|| {
            packed_here = true;
            self.misses.fetch_add(1, Ordering::Relaxed);
            Arc::new(pack_into(wq, source_id, self.kc, self.nc))
        });
        if !packed_here {
            if packed.checksum != wq.checksum() {
                return Err(QuantError::SourceIdCollision(source_id.to_string()));
            }
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        Ok(packed.clone())
    }

    /// Cached pack keyed by `source_id`; `make` quantizes the weight only on
    /// the first call. Later arrivals block on the same cell and reuse.
    pub fn get_or_pack_with(
        &self,
        source_id: &str,
        make: impl FnOnce() -> Result<QuantizedWeight, QuantError>,
    ) -> Result<Arc<PackedWeight>, QuantError> {
        let cell = self.cell(source_id);
        let mut packed_here = false;
        let packed = cell.get_or_try_init(|| {
            packed_here = true;
            let wq = make()?;
            self.misses.fetch_add(1, Ordering::Relaxed);
            Ok::<_, QuantError>(Arc::new(pack_into(&wq, source_id, self.kc, self.nc)))
        })?;
        if !packed_here {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        Ok(packed.clone())
    }
}

fn pack_into(wq: &QuantizedWeight, source_id: &str, kc: usize, nc: usize) -> PackedWeight {
    PackedWeight {
        source_id: source_id.to_string(),
        payload: pack_payload(wq, kc, nc),
        k: wq.k,
        n: wq.n,
        kc,
        nc,
        col_scales: wq.col_scales.clone(),
        checksum: wq.checksum(),
    }
}

/// Quantized GEMM with dequantizing output, optional bias and fused epilogue:
/// C[i,j] = a.scale * col_scales[j] * sum_k (a[i,k]-zp) * w[k,j] + bias[j].
/// The zero-point correction is carried exactly in the integer accumulator.
pub fn gemm_i8(
    a: &ActQuant,
    w: &PackedWeight,
    bias: Option<&[f32]>,
    epilogue: QEpilogue,
) -> Result<Matrix<f32>, QuantError> {
    if a.cols != w.k {
        return Err(QuantError::InnerDim { m: a.rows, k: a.cols, k2: w.k, n: w.n });
    }
    if a.cols > MAX_K {
        return Err(QuantError::KTooLarge(a.cols));
    }
    if let Some(b) = bias {
        if b.len() != w.n {
            return Err(QuantError::BiasLen { got: b.len(), want: w.n });
        }
    }
    let (m, k, n) = (a.rows, a.cols, w.n);
    let zp = a.zero_point as i32;
    let mut out = Matrix::zeros(m, n);

    // Panel loop mirrors the packed layout: i64 cross-panel accumulators,
    // exact i32 arithmetic inside each (kc x nc) panel.
    let mut acc = vec![0i64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0);
        let a_row = &a.values[i * k..(i + 1) * k];
        let mut panel_off = 0usize;
        for k0 in (0..k).step_by(w.kc) {
            let kb = w.kc.min(k - k0);
            let a_seg = &a_row[k0..k0 + kb];
            for n0 in (0..n).step_by(w.nc) {
                let nb = w.nc.min(n - n0);
                for j in 0..nb {
                    let col = &w.payload[panel_off + j * kb..panel_off + (j + 1) * kb];
                    let mut panel_acc: i32 = 0;
                    for (aq, &wq) in a_seg.iter().zip(col) {
                        panel_acc += (*aq as i32 - zp) * wq as i32;
                    }
                    acc[n0 + j] += panel_acc as i64;
                }
                panel_off += kb * nb;
            }
        }
        let out_row = out.row_mut(i);
        for j in 0..n {
            let mut v = a.scale * w.col_scales[j] * acc[j] as f32;
            if let Some(b) = bias {
                v += b[j];
            }
            out_row[j] = match epilogue {
                QEpilogue::None => v,
                QEpilogue::Relu => v.max(0.0),
            };
        }
    }
    Ok(out)
}

/// Convenience path used by the encoder: quantize activations, pack (cached)
/// and multiply in one call.
pub fn gemm_i8_dynamic(
    x: &Matrix<f32>,
    w: &Matrix<f32>,
    source_id: &str,
    cache: &PackCache,
    bias: Option<&[f32]>,
    epilogue: QEpilogue,
) -> Result<Matrix<f32>, QuantError> {
    let a = quantize_activations_dynamic(x)?;
    let packed = cache.get_or_pack_with(source_id, || quantize_weight_per_column(w))?;
    gemm_i8(&a, &packed, bias, epilogue)
}
