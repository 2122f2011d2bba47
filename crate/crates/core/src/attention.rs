//! Spatial and iterative topology attention.
//!
//! The critical-point maps of the `C` slices of a stack form the keys; the
//! center slice's map, replicated over the channels, forms the queries. The
//! resulting similarity map redistributes the center likelihood map, and the
//! redistributed map is added back onto it with a learned weight. Across
//! training epochs the attention output is smoothed by an exponential moving
//! average.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{clamp01, ScalarField2D, SliceStack};
use crate::persistence::{critical_point_map, CriticalPointMap};
use crate::scalar::Real;

/// Queries and keys as `C x N` row-major matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryKeyPack<T> {
    q: Vec<T>,
    k: Vec<T>,
    channels: usize,
    height: usize,
    width: usize,
}

impl<T: Real> QueryKeyPack<T> {
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn q(&self) -> &[T] {
        &self.q
    }

    pub fn k(&self) -> &[T] {
        &self.k
    }

    #[inline]
    pub fn q_at(&self, channel: usize, pixel: usize) -> T {
        self.q[channel * self.pixels() + pixel]
    }

    #[inline]
    pub fn k_at(&self, channel: usize, pixel: usize) -> T {
        self.k[channel * self.pixels() + pixel]
    }

    /// Builds a pack from raw matrices. Entries must lie in `[0, 1]` and all
    /// query rows must be equal.
    pub fn from_parts(q: Vec<T>, k: Vec<T>, channels: usize, height: usize, width: usize) -> Result<Self> {
        let n = height * width;
        if channels == 0 || n == 0 || q.len() != channels * n || k.len() != channels * n {
            return Err(Error::Shape(format!(
                "pack needs {channels}x{n} matrices, got q={} k={}",
                q.len(),
                k.len()
            )));
        }
        if q.iter().chain(&k).any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::Value("query/key entries must lie in [0,1]".into()));
        }
        if (1..channels).any(|c| q[c * n..(c + 1) * n] != q[..n]) {
            return Err(Error::Value("query rows must be identical".into()));
        }
        Ok(Self { q, k, channels, height, width })
    }
}

/// Stacks the `C` critical-point maps as keys and replicates the center map as queries.
pub fn build_query_key<T: Real>(cp_maps: &[CriticalPointMap<T>], center_index: usize) -> Result<QueryKeyPack<T>> {
    let first = cp_maps.first().ok_or_else(|| Error::Shape("no critical-point maps".into()))?;
    if center_index >= cp_maps.len() {
        return Err(Error::Shape(format!("center {center_index} outside {} maps", cp_maps.len())));
    }
    let (height, width) = first.field.dims();
    if cp_maps.iter().any(|m| m.field.dims() != (height, width)) {
        return Err(Error::Shape("critical-point maps differ in size".into()));
    }
    let channels = cp_maps.len();
    let center = cp_maps[center_index].field.values();
    let mut q = Vec::with_capacity(channels * center.len());
    let mut k = Vec::with_capacity(channels * center.len());
    for map in cp_maps {
        q.extend_from_slice(center);
        k.extend_from_slice(map.field.values());
    }
    Ok(QueryKeyPack { q, k, channels, height, width })
}

/// Row-stochastic `N x N` matrix; row `n` holds the weights of pixel `n` over all `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Real> SimilarityMap<T> {
    #[inline]
    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, n: usize, m: usize) -> T {
        self.data[n * self.n + m]
    }

    #[inline]
    pub fn row(&self, n: usize) -> &[T] {
        &self.data[n * self.n..(n + 1) * self.n]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Wraps an explicit matrix, checking that rows are stochastic.
    pub fn from_rows(n: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * n || n == 0 {
            return Err(Error::Shape(format!("similarity map {n}x{n} with {} entries", data.len())));
        }
        for row in data.chunks(n) {
            let s: T = row.iter().copied().sum();
            if row.iter().any(|v| *v < T::zero()) || (s - T::one()).abs() > T::lit(1e-6) {
                return Err(Error::Value("similarity rows must be non-negative and sum to 1".into()));
            }
        }
        Ok(Self { n, data })
    }
}

/// `SM[n][m] = softmax_m( sum_c q[c,m] * k[c,n] )`.
pub fn similarity<T: Real>(pack: &QueryKeyPack<T>) -> SimilarityMap<T> {
    let n = pack.pixels();
    let c = pack.channels;
    let mut data = vec![T::zero(); n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(row, out)| {
        let key: Vec<T> = (0..c).map(|ch| pack.k_at(ch, row)).collect();
        for (m, slot) in out.iter_mut().enumerate() {
            let mut score = T::zero();
            for (ch, kv) in key.iter().enumerate() {
                score += pack.q_at(ch, m) * *kv;
            }
            *slot = score;
        }
        let peak = out.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in out.iter_mut() {
            *v = (*v - peak).exp();
            total += *v;
        }
        for v in out.iter_mut() {
            *v /= total;
        }
    });
    SimilarityMap { n, data }
}

/// `o[n] = sum_m p[m] * SM[n][m]`.
pub fn attend<T: Real>(p_center: &ScalarField2D<T>, sm: &SimilarityMap<T>) -> Result<ScalarField2D<T>> {
    if p_center.len() != sm.n {
        return Err(Error::Shape(format!("{} pixels vs {}x{} similarity map", p_center.len(), sm.n, sm.n)));
    }
    let p = p_center.values();
    let values = sm
        .data
        .chunks(sm.n)
        .map(|row| clamp01(row.iter().zip(p).map(|(w, v)| *w * *v).sum::<T>()))
        .collect();
    Ok(ScalarField2D::from_raw(p_center.width(), p_center.height(), values))
}

/// `clamp(weight * o + p, 0, 1)`.
pub fn sta_combine<T: Real>(
    p_center: &ScalarField2D<T>,
    o: &ScalarField2D<T>,
    attention_weight: T,
) -> Result<ScalarField2D<T>> {
    if !p_center.same_dims(o) {
        return Err(Error::Shape("attention map and likelihood map differ in size".into()));
    }
    let values = p_center
        .values()
        .iter()
        .zip(o.values())
        .map(|(p, o)| clamp01(attention_weight * *o + *p))
        .collect();
    Ok(ScalarField2D::from_raw(p_center.width(), p_center.height(), values))
}

/// Attention state carried across epochs for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState<T> {
    pub o_prev: Option<ScalarField2D<T>>,
    pub attention_weight: T,
    beta: T,
}

impl<T: Real> AttentionState<T> {
    pub fn new(beta: T, attention_weight: T) -> Result<Self> {
        if !(beta >= T::zero() && beta <= T::one()) {
            return Err(Error::param("beta", format!("{beta} not in [0,1]")));
        }
        Ok(Self { o_prev: None, attention_weight, beta })
    }

    #[inline]
    pub fn beta(&self) -> T {
        self.beta
    }

    /// Blends `o_curr` with the previous epoch's output and remembers the result.
    pub fn ita_update(&mut self, o_curr: &ScalarField2D<T>) -> Result<ScalarField2D<T>> {
        let out = match &self.o_prev {
            None => o_curr.clone(),
            Some(prev) => {
                if !prev.same_dims(o_curr) {
                    return Err(Error::Shape("ITA history and current map differ in size".into()));
                }
                let keep = self.beta;
                let take = T::one() - keep;
                let values = prev
                    .values()
                    .iter()
                    .zip(o_curr.values())
                    .map(|(a, b)| clamp01(keep * *a + take * *b))
                    .collect();
                ScalarField2D::from_raw(o_curr.width(), o_curr.height(), values)
            }
        };
        self.o_prev = Some(out.clone());
        Ok(out)
    }
}

/// Free-function form of [`AttentionState::ita_update`].
pub fn ita_update<T: Real>(state: &mut AttentionState<T>, o_curr: &ScalarField2D<T>) -> Result<ScalarField2D<T>> {
    state.ita_update(o_curr)
}

/// Intermediate products of one attention pass.
#[derive(Debug, Clone)]
pub struct AttentionMaps<T> {
    pub cp_maps: Vec<CriticalPointMap<T>>,
    pub similarity: SimilarityMap<T>,
    /// Attention output before any ITA blending.
    pub o: ScalarField2D<T>,
}

/// Critical-point extraction parameters for the attention pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopologyAttention<T> {
    pub epsilon: T,
    pub sigma: T,
}

impl<T: Real> TopologyAttention<T> {
    /// Critical-point maps, similarity map and attention output for a stack
    /// of likelihood maps, focused on its center slice.
    pub fn maps(&self, probs: &SliceStack<T>) -> Result<AttentionMaps<T>> {
        let cp_maps = probs
            .slices()
            .iter()
            .map(|p| critical_point_map(p, self.epsilon, self.sigma))
            .collect::<Result<Vec<_>>>()?;
        let pack = build_query_key(&cp_maps, probs.center_index())?;
        let similarity = similarity(&pack);
        let o = attend(probs.center(), &similarity)?;
        Ok(AttentionMaps { cp_maps, similarity, o })
    }

    /// Refined center map `clamp(weight * o + P)`, without ITA history.
    pub fn refine(&self, probs: &SliceStack<T>, attention_weight: T) -> Result<ScalarField2D<T>> {
        let maps = self.maps(probs)?;
        sta_combine(probs.center(), &maps.o, attention_weight)
    }
}

/// Tile origins along one axis: back-to-back tiles plus one flush with the end.
pub fn tile_origins(len: usize, patch: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|i| i * patch).take_while(|o| o + patch <= len).collect();
    if let Some(&last) = out.last() {
        if last + patch < len {
            out.push(len - patch);
        }
    }
    out
}

/// Runs `process` on every `patch x patch` tile of the stack and stitches the
/// results back, averaging pixels covered by more than one tile.
pub fn tile_and_stitch<T, F>(stack: &SliceStack<T>, patch: usize, process: F) -> Result<SliceStack<T>>
where
    T: Real,
    F: Fn(&SliceStack<T>) -> Result<SliceStack<T>> + Sync,
{
    let (h, w) = (stack.height(), stack.width());
    if patch < 3 {
        return Err(Error::param("patch", format!("{patch} < 3")));
    }
    if patch > h.min(w) {
        return Err(Error::param("patch", format!("{patch} larger than {h}x{w} image")));
    }
    let rows = tile_origins(h, patch);
    let cols = tile_origins(w, patch);
    let origins: Vec<(usize, usize)> = rows.iter().flat_map(|r| cols.iter().map(move |c| (*r, *c))).collect();

    let tiles = origins
        .par_iter()
        .map(|&(r, c)| {
            let out = process(&stack.crop(r, c, patch, patch)?)?;
            if out.height() != patch || out.width() != patch {
                return Err(Error::Shape("tile process changed the patch size".into()));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let depth = tiles[0].len();
    if tiles.iter().any(|t| t.len() != depth) {
        return Err(Error::Shape("tile process returned stacks of different lengths".into()));
    }
    // running means, so identical overlapping values pass through unchanged
    let mut means = vec![vec![T::zero(); h * w]; depth];
    let mut counts = vec![0u32; h * w];
    for (&(r0, c0), tile) in origins.iter().zip(&tiles) {
        for r in 0..patch {
            for c in 0..patch {
                let i = (r0 + r) * w + c0 + c;
                counts[i] += 1;
                let n = T::lit(f64::from(counts[i]));
                for (mean, slice) in means.iter_mut().zip(tile.slices()) {
                    let x = slice.get(r, c);
                    mean[i] = if counts[i] == 1 { x } else { mean[i] + (x - mean[i]) / n };
                }
            }
        }
    }
    let slices = means.into_iter().map(|m| ScalarField2D::from_raw(w, h, m.into_iter().map(clamp01).collect())).collect();
    SliceStack::new(slices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cp(w: usize, h: usize, v: Vec<f64>) -> CriticalPointMap<f64> {
        CriticalPointMap { field: ScalarField2D::new(w, h, v).unwrap() }
    }

    #[test]
    fn single_slice_pack_is_self_attention() {
        let pack = build_query_key(&[cp(2, 2, vec![0.1, 0.5, 0.0, 1.0])], 0).unwrap();
        assert_eq!(pack.q(), pack.k());
        assert_eq!(pack.channels(), 1);
    }

    #[test]
    fn identical_maps_give_equal_q_and_k() {
        let m = cp(2, 2, vec![0.3, 0.2, 0.9, 0.0]);
        let pack = build_query_key(&[m.clone(), m.clone(), m], 1).unwrap();
        assert_eq!(pack.q(), pack.k());
    }

    #[test]
    fn distinct_maps_build_explicit_matrices() {
        let a = cp(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let b = cp(2, 2, vec![0.5, 0.6, 0.7, 0.8]);
        let c = cp(2, 2, vec![0.9, 1.0, 0.0, 0.25]);
        let pack = build_query_key(&[a, b, c], 1).unwrap();
        #[rustfmt::skip]
        let k = vec![
            0.1, 0.2, 0.3, 0.4,
            0.5, 0.6, 0.7, 0.8,
            0.9, 1.0, 0.0, 0.25,
        ];
        #[rustfmt::skip]
        let q = vec![
            0.5, 0.6, 0.7, 0.8,
            0.5, 0.6, 0.7, 0.8,
            0.5, 0.6, 0.7, 0.8,
        ];
        assert_eq!(pack.k(), &k[..]);
        assert_eq!(pack.q(), &q[..]);
    }

    #[test]
    fn pack_rejects_mismatched_maps() {
        let a = cp(2, 2, vec![0.0; 4]);
        let b = cp(4, 1, vec![0.0; 4]);
        assert!(matches!(build_query_key(&[a.clone(), b], 0), Err(Error::Shape(_))));
        assert!(build_query_key(&[a], 1).is_err());
        assert!(build_query_key::<f64>(&[], 0).is_err());
    }

    #[test]
    fn zero_pack_gives_uniform_rows() {
        let pack = QueryKeyPack::<f64>::from_parts(vec![0.0; 3 * 6], vec![0.0; 3 * 6], 3, 2, 3).unwrap();
        let sm = similarity(&pack);
        assert!(sm.data().iter().all(|v| (*v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn two_pixel_softmax() {
        let pack = QueryKeyPack::from_parts(vec![1.0, 0.0], vec![1.0, 0.0], 1, 1, 2).unwrap();
        let sm = similarity(&pack);
        // independent scalar evaluation
        let e = std::f64::consts::E;
        let expected = [e / (e + 1.0), 1.0 / (e + 1.0), 0.5, 0.5];
        for (a, b) in sm.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((sm.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((sm.get(0, 1) - 0.2689).abs() < 1e-4);

        let p = ScalarField2D::new(2, 1, vec![0.2, 0.9]).unwrap();
        let o = attend(&p, &sm).unwrap();
        assert!((o.get(0, 0) - (0.2 * expected[0] + 0.9 * expected[1])).abs() < 1e-15);
        assert!((o.get(0, 1) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn attend_uniform_and_identity() {
        let p = ScalarField2D::<f64>::new(2, 2, vec![0.1, 0.4, 0.7, 0.2]).unwrap();
        let uniform = SimilarityMap::from_rows(4, vec![0.25; 16]).unwrap();
        let o = attend(&p, &uniform).unwrap();
        assert!(o.values().iter().all(|v| (*v - 0.35).abs() < 1e-15));

        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let o = attend(&p, &SimilarityMap::from_rows(4, eye).unwrap()).unwrap();
        assert_eq!(o, p);

        let small = SimilarityMap::from_rows(2, vec![0.5; 4]).unwrap();
        assert!(matches!(attend(&p, &small), Err(Error::Shape(_))));
    }

    #[test]
    fn sta_combine_cases() {
        let p = ScalarField2D::<f64>::filled(3, 3, 0.9).unwrap();
        let o = ScalarField2D::filled(3, 3, 0.5).unwrap();
        assert_eq!(sta_combine(&p, &o, 0.0).unwrap(), p);
        assert_eq!(sta_combine(&p, &ScalarField2D::zeros(3, 3).unwrap(), 1.0).unwrap(), p);
        let clamped = sta_combine(&p, &o, 1.0).unwrap();
        assert!(clamped.values().iter().all(|v| *v == 1.0));
        assert!(sta_combine(&p, &ScalarField2D::zeros(2, 3).unwrap(), 1.0).is_err());
    }

    #[test]
    fn ita_cases() {
        let a = ScalarField2D::<f64>::filled(2, 2, 0.8).unwrap();
        let b = ScalarField2D::filled(2, 2, 0.2).unwrap();

        let mut s = AttentionState::new(0.0, 0.0).unwrap();
        assert_eq!(s.ita_update(&a).unwrap(), a);
        assert_eq!(s.ita_update(&b).unwrap(), b);

        let mut s = AttentionState::new(1.0, 0.0).unwrap();
        assert_eq!(s.ita_update(&a).unwrap(), a);
        assert_eq!(s.ita_update(&b).unwrap(), a);
        assert_eq!(s.ita_update(&b).unwrap(), a);

        let mut s = AttentionState::new(0.5, 0.0).unwrap();
        s.ita_update(&a).unwrap();
        let mid = ita_update(&mut s, &b).unwrap();
        assert!(mid.values().iter().all(|v| *v == 0.5));
        assert_eq!(s.o_prev.as_ref(), Some(&mid));

        assert!(AttentionState::<f64>::new(1.5, 0.0).is_err());
        let mut s = AttentionState::new(0.5, 0.0).unwrap();
        s.ita_update(&a).unwrap();
        assert!(s.ita_update(&ScalarField2D::zeros(3, 2).unwrap()).is_err());
    }

    #[test]
    fn tiling_layouts() {
        assert_eq!(tile_origins(39, 39), vec![0]);
        assert_eq!(tile_origins(78, 39), vec![0, 39]);
        assert_eq!(tile_origins(50, 39), vec![0, 11]);
        assert_eq!(tile_origins(100, 39), vec![0, 39, 61]);
    }

    fn ramp_stack(h: usize, w: usize) -> SliceStack<f64> {
        let f = ScalarField2D::from_fn(w, h, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0).unwrap();
        SliceStack::new(vec![f]).unwrap()
    }

    #[test]
    fn stitch_identity_and_counts() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        for (h, tiles) in [(39, 1), (78, 4), (50, 4)] {
            let stack = ramp_stack(h, h);
            let calls = AtomicUsize::new(0);
            let out = tile_and_stitch(&stack, 39, |t| {
                calls.fetch_add(1, Ordering::SeqCst);
                Ok(t.clone())
            })
            .unwrap();
            assert_eq!(calls.load(Ordering::SeqCst), tiles);
            for (a, b) in out.center().values().iter().zip(stack.center().values()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert!(matches!(
            tile_and_stitch(&ramp_stack(20, 30), 21, |t| Ok(t.clone())),
            Err(Error::Parameter { .. })
        ));
    }

    #[test]
    fn stitch_averages_overlaps() {
        let stack = SliceStack::new(vec![ScalarField2D::<f64>::zeros(5, 5).unwrap()]).unwrap();
        // tiles at 0 and 2 overlap on the middle band
        let out = tile_and_stitch(&stack, 3, |t| {
            let ones = ScalarField2D::filled(t.width(), t.height(), 1.0)?;
            SliceStack::new(vec![ones])
        })
        .unwrap();
        assert!(out.center().values().iter().all(|v| *v == 1.0));
    }

    fn random_pack(c: usize, n: usize) -> impl Strategy<Value = QueryKeyPack<f64>> {
        (proptest::collection::vec(0.0f64..=1.0, n), proptest::collection::vec(0.0f64..=1.0, c * n)).prop_map(
            move |(center, k)| {
                let q: Vec<f64> = (0..c).flat_map(|_| center.iter().copied()).collect();
                QueryKeyPack::from_parts(q, k, c, 3, n / 3).unwrap()
            },
        )
    }

    fn row_entropy(row: &[f64]) -> f64 {
        -row.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(pack in random_pack(3, 12)) {
            let sm = similarity(&pack);
            for n in 0..sm.size() {
                let s: f64 = sm.row(n).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(sm.row(n).iter().all(|v| *v > 0.0 && *v < 1.0));
            }
        }

        #[test]
        fn scaling_sharpens_rows(pack in random_pack(3, 9), c in 1.0f64..4.0) {
            // entries must stay in [0,1], so compare the pack against a copy shrunk by c
            let shrunk = QueryKeyPack::from_parts(
                pack.q().iter().map(|v| v / c).collect(),
                pack.k().iter().map(|v| v / c).collect(),
                pack.channels(), 3, 3).unwrap();
            let (sharp, soft) = (similarity(&pack), similarity(&shrunk));
            for n in 0..9 {
                prop_assert!(row_entropy(sharp.row(n)) <= row_entropy(soft.row(n)) + 1e-12);
            }
        }

        #[test]
        fn attend_is_convex(pack in random_pack(3, 9), p in proptest::collection::vec(0.0f64..=1.0, 9)) {
            let sm = similarity(&pack);
            let p = ScalarField2D::new(3, 3, p).unwrap();
            let o = attend(&p, &sm).unwrap();
            prop_assert!(o.values().iter().all(|v| *v >= p.min() - 1e-12 && *v <= p.max() + 1e-12));
        }

        #[test]
        fn joint_permutation_equivariance(
            pack in random_pack(3, 9),
            p in proptest::collection::vec(0.0f64..=1.0, 9),
            perm in Just((0..9usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let permute = |m: &[f64]| -> Vec<f64> {
                m.chunks(9).flat_map(|row| perm.iter().map(move |&i| row[i])).collect()
            };
            let permuted = QueryKeyPack::from_parts(permute(pack.q()), permute(pack.k()), 3, 3, 3).unwrap();
            let p_field = ScalarField2D::new(3, 3, p.clone()).unwrap();
            let p_perm = ScalarField2D::new(3, 3, permute(&p)).unwrap();
            let o = attend(&p_field, &similarity(&pack)).unwrap();
            let o_perm = attend(&p_perm, &similarity(&permuted)).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((o_perm.values()[j] - o.values()[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn zero_weight_is_identity(p in proptest::collection::vec(0.0f64..=1.0, 6), o in proptest::collection::vec(0.0f64..=1.0, 6)) {
            let p = ScalarField2D::new(3, 2, p).unwrap();
            let o = ScalarField2D::new(3, 2, o).unwrap();
            prop_assert_eq!(sta_combine(&p, &o, 0.0).unwrap(), p);
        }

        #[test]
        fn ita_stays_in_envelope(beta in 0.0f64..=1.0, seq in proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 4), 1..8)) {
            let mut s = AttentionState::new(beta, 0.0).unwrap();
            let mut lo = vec![1.0f64; 4];
            let mut hi = vec![0.0f64; 4];
            for o in seq {
                for i in 0..4 {
                    lo[i] = lo[i].min(o[i]);
                    hi[i] = hi[i].max(o[i]);
                }
                let out = s.ita_update(&ScalarField2D::new(2, 2, o).unwrap()).unwrap();
                for i in 0..4 {
                    prop_assert!(out.values()[i] >= lo[i] - 1e-12 && out.values()[i] <= hi[i] + 1e-12);
                }
            }
        }
    }
}
