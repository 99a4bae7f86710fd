//! Sparse targets: validity masks, [-1, 1] normalization, and infilling.
//!
//! Ground-truth depth and flow come with holes. Infilling imputes the holes
//! before the forward process so the noisy latents seen in training look like
//! the dense latents seen at inference; the loss still reads only originally
//! valid pixels.

use crate::error::{Error, Result};
use crate::field::DenseField;

/// Boolean H×W validity grid; true means annotated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn all_true(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![true; h * w] }
    }

    pub fn all_false(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![false; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self { h, w, data }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::InvalidArg(format!(
                "mask buffer length {} does not match ({h}, {w})",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn invert(&self) -> Self {
        Self { h: self.h, w: self.w, data: self.data.iter().map(|&b| !b).collect() }
    }
}

/// A target map plus its validity mask. Mask-false pixels carry the sentinel
/// value 0 until infilled.
#[derive(Clone, Debug)]
pub struct SparseTarget {
    pub values: DenseField,
    pub mask: Mask,
}

impl SparseTarget {
    pub fn new(values: DenseField, mask: Mask) -> Result<Self> {
        if values.height() != mask.height() || values.width() != mask.width() {
            return Err(Error::shape_mismatch(
                values.shape(),
                (mask.height(), mask.width()),
            ));
        }
        Ok(Self { values, mask })
    }

    pub fn dense(values: DenseField) -> Self {
        let mask = Mask::all_true(values.height(), values.width());
        Self { values, mask }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Depth,
    Flow,
}

/// Units mapping between physical values and the model's [-1, 1] range.
///
/// Depth uses an affine map `2*clamp(d, 0, d_max)/d_max - 1`; flow divides by
/// the frame dimensions (`u/W`, `v/H`) and clamps.
#[derive(Clone, Copy, Debug)]
pub struct NormSpec {
    pub task: Task,
    /// Depth cap in meters (10 indoor, 80 outdoor).
    pub d_max: f64,
    /// Flow denominators: ground-truth frame (width, height) in pixels.
    pub flow_denominators: (f64, f64),
}

impl NormSpec {
    pub fn depth(d_max: f64) -> Result<Self> {
        if d_max <= 0.0 {
            return Err(Error::InvalidArg(format!("d_max must be positive, got {d_max}")));
        }
        Ok(Self { task: Task::Depth, d_max, flow_denominators: (1.0, 1.0) })
    }

    pub fn flow(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArg("flow frame dims must be positive".into()));
        }
        Ok(Self {
            task: Task::Flow,
            d_max: 1.0,
            flow_denominators: (width as f64, height as f64),
        })
    }
}

/// Map physical units onto [-1, 1]. The mask is unchanged; mask-false pixels
/// are mapped like any other value.
pub fn normalize(target: &SparseTarget, spec: &NormSpec) -> Result<SparseTarget> {
    if spec.d_max <= 0.0 {
        return Err(Error::InvalidArg("d_max must be positive".into()));
    }
    let values = match spec.task {
        Task::Depth => target
            .values
            .map(|d| 2.0 * d.clamp(0.0, spec.d_max) / spec.d_max - 1.0),
        Task::Flow => {
            let (wd, hd) = spec.flow_denominators;
            let c = target.values.channels();
            if c != 2 {
                return Err(Error::ChannelMismatch { expected: 2, got: c });
            }
            let mut out = target.values.clone();
            for i in 0..out.len() {
                let denom = if i % 2 == 0 { wd } else { hd };
                out.data_mut()[i] = (out.data()[i] / denom).clamp(-1.0, 1.0);
            }
            out
        }
    };
    Ok(SparseTarget { values, mask: target.mask.clone() })
}

/// Exact inverse of [`normalize`] on the non-clamped range.
pub fn denormalize(values: &DenseField, spec: &NormSpec) -> DenseField {
    match spec.task {
        Task::Depth => values.map(|v| (v + 1.0) * spec.d_max / 2.0),
        Task::Flow => {
            let (wd, hd) = spec.flow_denominators;
            let mut out = values.clone();
            for i in 0..out.len() {
                let denom = if i % 2 == 0 { wd } else { hd };
                out.data_mut()[i] *= denom;
            }
            out
        }
    }
}

/// 2-D nearest-neighbor infill under Euclidean pixel distance.
///
/// Ties break toward the smaller row index, then the smaller column index.
/// Valid pixels pass through untouched.
pub fn infill_nearest(target: &SparseTarget) -> Result<DenseField> {
    let mask = &target.mask;
    if !mask.any() {
        return Err(Error::EmptyMask);
    }
    let (h, w, c) = target.values.shape();
    // Per-row sorted lists of valid columns for pruned row scans.
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                rows[y].push(x);
            }
        }
    }
    let mut out = target.values.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                continue;
            }
            // Best candidate ordered by (dist^2, row, col).
            let mut best: Option<(usize, usize, usize)> = None;
            for r in 0..h {
                let dy2 = (r as isize - y as isize).pow(2) as usize;
                if let Some((bd, _, _)) = best {
                    if dy2 > bd {
                        continue;
                    }
                }
                let cols = &rows[r];
                if cols.is_empty() {
                    continue;
                }
                // Nearest valid column in this row; tie -> smaller col index.
                let cand = match cols.binary_search(&x) {
                    Ok(_) => x,
                    Err(pos) => {
                        let left = pos.checked_sub(1).map(|i| cols[i]);
                        let right = cols.get(pos).copied();
                        match (left, right) {
                            (Some(l), Some(rr)) => {
                                let dl = x - l;
                                let dr = rr - x;
                                if dl <= dr {
                                    l
                                } else {
                                    rr
                                }
                            }
                            (Some(l), None) => l,
                            (None, Some(rr)) => rr,
                            (None, None) => unreachable!("cols non-empty"),
                        }
                    }
                };
                let d2 = dy2 + (cand as isize - x as isize).pow(2) as usize;
                let key = (d2, r, cand);
                if best.map_or(true, |b| key < b) {
                    best = Some(key);
                }
            }
            let (_, by, bx) = best.expect("mask has at least one valid pixel");
            for ch in 0..c {
                let v = target.values.get(by, bx, ch);
                out.set(y, x, ch, v);
            }
        }
    }
    Ok(out)
}

/// Flow infill: 1-D nearest-neighbor along rows, then along columns.
///
/// Pass 1 fills each row from that row's valid pixels (tie toward the smaller
/// column); rows without any valid pixel stay invalid. Pass 2 repeats
/// column-wise over the pass-1 result, treating pass-1 fills as valid (tie
/// toward the smaller row). All channels are filled from the same mask.
pub fn infill_flow_rowcol(target: &SparseTarget) -> Result<DenseField> {
    let mask = &target.mask;
    if !mask.any() {
        return Err(Error::EmptyMask);
    }
    let (h, w, c) = target.values.shape();
    let mut out = target.values.clone();
    let mut valid = mask.clone();

    // Pass 1: rows.
    for y in 0..h {
        let cols: Vec<usize> = (0..w).filter(|&x| mask.get(y, x)).collect();
        if cols.is_empty() {
            continue;
        }
        for x in 0..w {
            if mask.get(y, x) {
                continue;
            }
            let src = nearest_1d(&cols, x);
            for ch in 0..c {
                let v = target.values.get(y, src, ch);
                out.set(y, x, ch, v);
            }
            valid.set(y, x, true);
        }
    }

    // Pass 2: columns over the pass-1 result.
    let pass1 = out.clone();
    let pass1_valid = valid.clone();
    for x in 0..w {
        let rows_v: Vec<usize> = (0..h).filter(|&y| pass1_valid.get(y, x)).collect();
        if rows_v.is_empty() {
            continue;
        }
        for y in 0..h {
            if pass1_valid.get(y, x) {
                continue;
            }
            let src = nearest_1d(&rows_v, y);
            for ch in 0..c {
                let v = pass1.get(src, x, ch);
                out.set(y, x, ch, v);
            }
            valid.set(y, x, true);
        }
    }
    debug_assert!(valid.count_true() == h * w);
    Ok(out)
}

/// Nearest index in a sorted non-empty list; tie toward the smaller index.
fn nearest_1d(sorted: &[usize], q: usize) -> usize {
    match sorted.binary_search(&q) {
        Ok(i) => sorted[i],
        Err(pos) => {
            let left = pos.checked_sub(1).map(|i| sorted[i]);
            let right = sorted.get(pos).copied();
            match (left, right) {
                (Some(l), Some(r)) => {
                    if q - l <= r - q {
                        l
                    } else {
                        r
                    }
                }
                (Some(l), None) => l,
                (None, Some(r)) => r,
                (None, None) => unreachable!("list non-empty"),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_target(values: &[f64], valid: &[bool]) -> SparseTarget {
        let w = values.len();
        SparseTarget::new(
            DenseField::from_vec(1, w, 1, values.to_vec()).unwrap(),
            Mask::from_vec(1, w, valid.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn depth_normalization_endpoints_and_midpoint() {
        let spec = NormSpec::depth(10.0).unwrap();
        let t = SparseTarget::dense(DenseField::from_vec(1, 3, 1, vec![5.0, 0.0, 12.0]).unwrap());
        let n = normalize(&t, &spec).unwrap();
        assert_eq!(n.values.data()[0], 0.0);
        assert_eq!(n.values.data()[1], -1.0);
        assert_eq!(n.values.data()[2], 1.0); // clamped at d_max
    }

    #[test]
    fn flow_normalization_divides_by_frame_dims() {
        let spec = NormSpec::flow(64, 32).unwrap();
        let t = SparseTarget::dense(DenseField::from_vec(1, 1, 2, vec![-32.0, 8.0]).unwrap());
        let n = normalize(&t, &spec).unwrap();
        assert_eq!(n.values.data()[0], -0.5);
        assert_eq!(n.values.data()[1], 0.25);
    }

    #[test]
    fn denormalize_inverts_in_range() {
        let spec = NormSpec::depth(10.0).unwrap();
        let v = DenseField::from_vec(1, 2, 1, vec![0.0, -1.0]).unwrap();
        let d = denormalize(&v, &spec);
        assert_eq!(d.data()[0], 5.0);
        assert_eq!(d.data()[1], 0.0);
    }

    #[test]
    fn roundtrip_normalize_denormalize() {
        let spec = NormSpec::depth(10.0).unwrap();
        for i in 0..1000 {
            let meters = 10.0 * (i as f64) / 999.0;
            let t = SparseTarget::dense(DenseField::constant(1, 1, 1, meters));
            let n = normalize(&t, &spec).unwrap();
            let back = denormalize(&n.values, &spec);
            assert!((back.data()[0] - meters).abs() <= 1e-12);
        }
    }

    #[test]
    fn nonpositive_dmax_rejected() {
        assert!(NormSpec::depth(0.0).is_err());
        assert!(NormSpec::depth(-1.0).is_err());
    }

    #[test]
    fn nearest_row_example() {
        // [2, ., ., 8] -> [2, 2, 8, 8]
        let t = row_target(&[2.0, 0.0, 0.0, 8.0], &[true, false, false, true]);
        let f = infill_nearest(&t).unwrap();
        assert_eq!(f.data(), &[2.0, 2.0, 8.0, 8.0]);
    }

    #[test]
    fn nearest_tie_prefers_smaller_index() {
        // [2, ., 8]: middle equidistant -> earlier column
        let t = row_target(&[2.0, 0.0, 8.0], &[true, false, true]);
        let f = infill_nearest(&t).unwrap();
        assert_eq!(f.data(), &[2.0, 2.0, 8.0]);
    }

    #[test]
    fn single_valid_pixel_floods() {
        let mut mask = Mask::all_false(3, 3);
        mask.set(1, 2, true);
        let mut vals = DenseField::zeros(3, 3, 1);
        vals.set(1, 2, 0, 4.0);
        let t = SparseTarget::new(vals, mask).unwrap();
        let f = infill_nearest(&t).unwrap();
        assert!(f.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn all_false_mask_is_error() {
        let t = SparseTarget::new(DenseField::zeros(2, 2, 1), Mask::all_false(2, 2)).unwrap();
        assert!(matches!(infill_nearest(&t), Err(Error::EmptyMask)));
        assert!(matches!(infill_flow_rowcol(&t), Err(Error::EmptyMask)));
    }

    #[test]
    fn rowcol_single_corner_floods() {
        // 2x2 with u known only at (0,0)=3: row pass fills (0,1), column pass
        // fills row 1 from row 0.
        let mut mask = Mask::all_false(2, 2);
        mask.set(0, 0, true);
        let mut vals = DenseField::zeros(2, 2, 2);
        vals.set(0, 0, 0, 3.0);
        vals.set(0, 0, 1, 3.0);
        let t = SparseTarget::new(vals, mask).unwrap();
        let f = infill_flow_rowcol(&t).unwrap();
        assert!(f.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn rowcol_fully_valid_is_identity() {
        let vals = DenseField::from_fn(3, 3, 2, |y, x, c| (y * 10 + x + c) as f64);
        let t = SparseTarget::dense(vals.clone());
        let f = infill_flow_rowcol(&t).unwrap();
        assert_eq!(f.data(), vals.data());
    }

    #[test]
    fn rowcol_two_pass_trace() {
        // valid at (0,0)=1 and (1,1)=5: row pass fills (0,1)=1 and (1,0)=5.
        let mut mask = Mask::all_false(2, 2);
        mask.set(0, 0, true);
        mask.set(1, 1, true);
        let mut vals = DenseField::zeros(2, 2, 2);
        for ch in 0..2 {
            vals.set(0, 0, ch, 1.0);
            vals.set(1, 1, ch, 5.0);
        }
        let t = SparseTarget::new(vals, mask).unwrap();
        let f = infill_flow_rowcol(&t).unwrap();
        assert_eq!(f.get(0, 1, 0), 1.0);
        assert_eq!(f.get(1, 0, 0), 5.0);
        assert_eq!(f.get(0, 0, 0), 1.0);
        assert_eq!(f.get(1, 1, 0), 5.0);
    }

    #[test]
    fn infill_preserves_valid_pixels_bit_exactly() {
        let vals = DenseField::from_fn(8, 8, 1, |y, x, _| ((y * 8 + x) as f64 * 0.37).sin());
        let mask = Mask::from_fn(8, 8, |y, x| (y * 8 + x) % 3 != 1);
        let t = SparseTarget::new(vals.clone(), mask.clone()).unwrap();
        for f in [infill_nearest(&t).unwrap(), infill_flow_rowcol(&t).unwrap()] {
            for y in 0..8 {
                for x in 0..8 {
                    if mask.get(y, x) {
                        assert_eq!(f.get(y, x, 0).to_bits(), vals.get(y, x, 0).to_bits());
                    }
                }
            }
        }
    }

    /// Brute-force oracle: scan all valid pixels in (row, col) order keeping
    /// strictly better (dist^2, row, col) keys.
    pub(crate) fn brute_force_nearest(target: &SparseTarget) -> DenseField {
        let (h, w, c) = target.values.shape();
        let mut out = target.values.clone();
        for y in 0..h {
            for x in 0..w {
                if target.mask.get(y, x) {
                    continue;
                }
                let mut best: Option<(usize, usize, usize)> = None;
                for r in 0..h {
                    for cc in 0..w {
                        if !target.mask.get(r, cc) {
                            continue;
                        }
                        let d2 = ((r as isize - y as isize).pow(2)
                            + (cc as isize - x as isize).pow(2)) as usize;
                        let key = (d2, r, cc);
                        if best.map_or(true, |b| key < b) {
                            best = Some(key);
                        }
                    }
                }
                let (_, by, bx) = best.unwrap();
                for ch in 0..c {
                    let v = target.values.get(by, bx, ch);
                    out.set(y, x, ch, v);
                }
            }
        }
        out
    }

    #[test]
    fn nearest_matches_brute_force_on_random_masks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let h = rng.gen_range(1..=16);
            let w = rng.gen_range(1..=16);
            let density: f64 = rng.gen_range(0.05..0.9);
            let mask = Mask::from_fn(h, w, |_, _| rng.gen_bool(density));
            if !mask.any() {
                continue;
            }
            let vals = DenseField::from_fn(h, w, 1, |y, x, _| (y * 31 + x * 7) as f64);
            let t = SparseTarget::new(vals, mask).unwrap();
            let fast = infill_nearest(&t).unwrap();
            let brute = brute_force_nearest(&t);
            assert_eq!(fast.data(), brute.data());
        }
    }
}
