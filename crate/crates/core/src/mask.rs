//! Binary masks and spatio-temporal overlap arithmetic shared by the
//! generator (ground truth), the decoder (predictions), and the metrics.

use crate::error::{Error, Result};

/// A single-frame binary mask stored row-major, one byte per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::InvalidArgument {
                op: "Mask::new",
                msg: format!("expected {h}x{w}={} pixels, got {}", h * w, data.len()),
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument {
                op: "Mask::new",
                msg: "mask values must be 0 or 1".into(),
            });
        }
        Ok(Self { h, w, data })
    }

    /// Thresholds a flat row of logits: foreground where `logit > cut`.
    pub fn from_logits(h: usize, w: usize, logits: &[f64], cut: f64) -> Self {
        Self {
            h,
            w,
            data: logits.iter().map(|&v| u8::from(v > cut)).collect(),
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = u8::from(v);
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_blank(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// `(intersection, union)` pixel counts against another mask.
    pub fn overlap(&self, other: &Mask) -> (usize, usize) {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        let mut inter = 0;
        let mut union = 0;
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += usize::from(*a != 0 && *b != 0);
            union += usize::from(*a != 0 || *b != 0);
        }
        (inter, union)
    }

    /// Per-frame IoU with the both-empty convention of 1.0.
    pub fn iou(&self, other: &Mask) -> f64 {
        let (i, u) = self.overlap(other);
        if u == 0 {
            1.0
        } else {
            i as f64 / u as f64
        }
    }
}

/// Spatio-temporal IoU over aligned frame sequences:
/// `Σ_t |∩_t| / Σ_t |∪_t|`, with 1.0 when both sequences are empty.
pub fn st_iou(a: &[Mask], b: &[Mask]) -> f64 {
    debug_assert_eq!(a.len(), b.len(), "tracklets must cover the same frames");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (ma, mb) in a.iter().zip(b) {
        let (i, u) = ma.overlap(mb);
        inter += i;
        union += u;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
