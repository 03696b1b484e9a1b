//! SI-SDR metric and loss, permutation-invariant assignment and the combined
//! guided + PIT objective.
//!
//! SI-SDR is evaluated without mean removal unless [`SiSdrOptions::zero_mean`]
//! is set. `ε` times the estimate energy is added to both the target and the
//! error energy: a perfect estimate scores about 80 dB at any amplitude, equal
//! energies stay at exactly 0 dB and the value is exactly scale invariant.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{invalid, Result};

pub const SI_SDR_EPS: f64 = 1e-8;
const DB: f64 = 10.0 / std::f64::consts::LN_10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SiSdrOptions {
    pub zero_mean: bool,
}

fn centred(x: &[f64], zero_mean: bool) -> Vec<f64> {
    if zero_mean {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| v - m).collect()
    } else {
        x.to_vec()
    }
}

/// SI-SDR in dB and its gradient with respect to `est`.
pub fn si_sdr_with_grad(est: &[f64], reference: &[f64], opts: SiSdrOptions) -> Result<(f64, Vec<f64>)> {
    if est.len() != reference.len() {
        return Err(invalid!("estimate has {} samples, reference {}", est.len(), reference.len()));
    }
    if est.is_empty() {
        return Err(invalid!("empty signals"));
    }
    let e = centred(est, opts.zero_mean);
    let r = centred(reference, opts.zero_mean);
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(invalid!("reference signal is identically zero"));
    }
    let alpha = e.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
    let target: Vec<f64> = r.iter().map(|v| alpha * v).collect();
    let noise: Vec<f64> = e.iter().zip(&target).map(|(a, t)| a - t).collect();
    let floor = SI_SDR_EPS * e.iter().map(|v| v * v).sum::<f64>() + f64::MIN_POSITIVE;
    let st = target.iter().map(|v| v * v).sum::<f64>() + floor;
    let sn = noise.iter().map(|v| v * v).sum::<f64>() + floor;
    let value = DB * (st / sn).ln();
    let mut grad: Vec<f64> = target
        .iter()
        .zip(&noise)
        .zip(&e)
        .map(|((t, n), x)| {
            let shared = 2.0 * SI_SDR_EPS * x;
            DB * ((2.0 * t + shared) / st - (2.0 * n + shared) / sn)
        })
        .collect();
    if opts.zero_mean {
        let m = grad.iter().sum::<f64>() / grad.len() as f64;
        grad.iter_mut().for_each(|g| *g -= m);
    }
    Ok((value, grad))
}

pub fn si_sdr_slices(est: &[f64], reference: &[f64], opts: SiSdrOptions) -> Result<f64> {
    si_sdr_with_grad(est, reference, opts).map(|(v, _)| v)
}

/// SI-SDR of `est` against `reference`, in dB.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_sdr_slices(est.samples(), reference.samples(), SiSdrOptions::default())
}

/// `si_sdr(est, ref) - si_sdr(mix, ref)`.
pub fn si_sdr_improvement(est: &Waveform, reference: &Waveform, mix: &Waveform) -> Result<f64> {
    Ok(si_sdr(est, reference)? - si_sdr(mix, reference)?)
}

/// Advances `p` to the next permutation in lexicographic order; false after the last one.
pub fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let Some(i) = (0..p.len() - 1).rev().find(|&i| p[i] < p[i + 1]) else {
        return false;
    };
    let j = (i + 1..p.len()).rev().find(|&j| p[j] > p[i]).expect("pivot has a successor");
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

/// Exhaustive minimum of the mean of `cost[i][perm[i]]` over all permutations.
/// Ties keep the lexicographically smallest permutation.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let m = cost.len();
    if m == 0 {
        return (0.0, Vec::new());
    }
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best = (f64::INFINITY, perm.clone());
    loop {
        let total = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>() / m as f64;
        if total < best.0 {
            best = (total, perm.clone());
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best
}

/// Minimum mean SI-SDR loss over all pairings; `permutation[i]` is the
/// reference index assigned to estimate `i`.
pub fn pit_min_loss(ests: &[Waveform], refs: &[Waveform]) -> Result<(f64, Vec<usize>)> {
    if ests.len() != refs.len() {
        return Err(invalid!("{} estimates for {} references", ests.len(), refs.len()));
    }
    let cost = ests
        .iter()
        .map(|e| refs.iter().map(|r| si_sdr(e, r).map(|v| -v)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(min_cost_assignment(&cost))
}

/// Loss terms of one separated mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean SI-SDR loss over the visually guided streams, in fixed order.
    pub guided_loss: f64,
    /// Minimum mean SI-SDR loss over the unguided streams.
    pub pit_loss: f64,
    /// Reference index (relative to the unguided block) chosen for each unguided estimate.
    pub pit_permutation: Vec<usize>,
    pub total: f64,
}

/// Combined objective and its gradient w.r.t. `est` (`[N, T]`).
///
/// Rows `0..p` of `est` and `refs` are paired positionally; the remaining rows
/// are paired by the best permutation.
pub fn combined_loss_grad(
    est: ArrayView2<f64>,
    refs: ArrayView2<f64>,
    p: usize,
    opts: SiSdrOptions,
) -> Result<(LossBreakdown, Array2<f64>)> {
    let n = est.nrows();
    if refs.nrows() != n {
        return Err(invalid!("{n} estimates for {} references", refs.nrows()));
    }
    if est.ncols() != refs.ncols() {
        return Err(invalid!("estimate length {} differs from reference {}", est.ncols(), refs.ncols()));
    }
    if p > n {
        return Err(invalid!("{p} guided streams for {n} speakers"));
    }
    let row = |a: ArrayView2<f64>, i: usize| a.row(i).to_vec();
    let mut grad = Array2::zeros(est.raw_dim());

    let mut guided = 0.0;
    for i in 0..p {
        let (v, g) = si_sdr_with_grad(&row(est, i), &row(refs, i), opts)?;
        guided -= v;
        for (dst, gv) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = -gv / p as f64;
        }
    }
    if p > 0 {
        guided /= p as f64;
    }

    let m = n - p;
    let mut pairs = vec![vec![(0.0, Vec::new()); m]; m];
    for (i, prow) in pairs.iter_mut().enumerate() {
        let e = row(est, p + i);
        for (j, cell) in prow.iter_mut().enumerate() {
            *cell = si_sdr_with_grad(&e, &row(refs, p + j), opts)?;
        }
    }
    let cost: Vec<Vec<f64>> = pairs.iter().map(|r| r.iter().map(|(v, _)| -v).collect()).collect();
    let (pit, perm) = min_cost_assignment(&cost);
    for (i, &j) in perm.iter().enumerate() {
        for (dst, gv) in grad.row_mut(p + i).iter_mut().zip(&pairs[i][j].1) {
            *dst = -gv / m as f64;
        }
    }
    let breakdown = LossBreakdown { guided_loss: guided, pit_loss: pit, pit_permutation: perm, total: guided + pit };
    Ok((breakdown, grad))
}

/// Combined objective over waveforms.
pub fn combined_loss(est: &[Waveform], refs: &[Waveform], p: usize) -> Result<LossBreakdown> {
    let to_matrix = |ws: &[Waveform]| -> Result<Array2<f64>> {
        let t = ws.first().map_or(0, Waveform::len);
        if ws.iter().any(|w| w.len() != t) {
            return Err(invalid!("signals differ in length"));
        }
        Ok(Array2::from_shape_fn((ws.len(), t), |(i, j)| ws[i].samples()[j]))
    };
    let e = to_matrix(est)?;
    let r = to_matrix(refs)?;
    combined_loss_grad(e.view(), r.view(), p, SiSdrOptions::default()).map(|(b, _)| b)
}

/// Per-stream SI-SDR and SI-SDRi: guided streams positionally, the rest under
/// the permutation that maximises their mean SI-SDR. Results follow reference order.
pub fn score_streams(est: &[Waveform], refs: &[Waveform], mix: &Waveform, p: usize) -> Result<Vec<(f64, f64)>> {
    if est.len() != refs.len() || p > est.len() {
        return Err(invalid!("{} estimates, {} references, {p} guided", est.len(), refs.len()));
    }
    let (_, perm) = pit_min_loss(&est[p..], &refs[p..])?;
    let mut out = vec![(0.0, 0.0); refs.len()];
    for (i, slot) in out.iter_mut().enumerate().take(p) {
        let v = si_sdr(&est[i], &refs[i])?;
        *slot = (v, v - si_sdr(mix, &refs[i])?);
    }
    for (i, &j) in perm.iter().enumerate() {
        let r = &refs[p + j];
        let v = si_sdr(&est[p + i], r)?;
        out[p + j] = (v, v - si_sdr(mix, r)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(x: &[f64]) -> Waveform {
        Waveform::new(x.to_vec(), 16000).unwrap()
    }

    fn noise(len: usize, seed: u64) -> Waveform {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        w(&(0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn hand_case_is_zero_db() {
        let v = si_sdr(&w(&[1.0, 0.0]), &w(&[1.0, 1.0])).unwrap();
        assert!(v.abs() <= 1e-9, "{v}");
    }

    #[test]
    fn identity_is_bounded_and_large() {
        let r = noise(100, 1);
        assert!(si_sdr(&r, &r).unwrap() >= 60.0);
    }

    #[test]
    fn zero_reference_and_length_mismatch_are_errors() {
        assert!(si_sdr(&w(&[1.0, 2.0]), &w(&[0.0, 0.0])).is_err());
        assert!(si_sdr(&w(&[1.0, 2.0]), &w(&[1.0])).is_err());
    }

    #[test]
    fn zero_mean_option_removes_offsets() {
        let r = noise(64, 2);
        let shifted: Vec<f64> = r.samples().iter().map(|v| v + 3.0).collect();
        let plain = si_sdr_slices(&shifted, r.samples(), SiSdrOptions::default()).unwrap();
        let centred = si_sdr_slices(&shifted, r.samples(), SiSdrOptions { zero_mean: true }).unwrap();
        assert!(centred > 60.0 && plain < 20.0);
    }

    #[test]
    fn gradient_matches_central_difference() {
        for zero_mean in [false, true] {
            let opts = SiSdrOptions { zero_mean };
            let e = noise(16, 3).into_samples();
            let r = noise(16, 4).into_samples();
            let (_, g) = si_sdr_with_grad(&e, &r, opts).unwrap();
            for k in 0..e.len() {
                let h = 1e-6;
                let mut ep = e.clone();
                ep[k] += h;
                let mut em = e.clone();
                em[k] -= h;
                let fd = (si_sdr_slices(&ep, &r, opts).unwrap() - si_sdr_slices(&em, &r, opts).unwrap()) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "k={k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn permutations_enumerate_lexicographically() {
        let mut p = vec![0, 1, 2];
        let mut seen = vec![p.clone()];
        while next_permutation(&mut p) {
            seen.push(p.clone());
        }
        assert_eq!(seen, vec![
            vec![0, 1, 2], vec![0, 2, 1], vec![1, 0, 2], vec![1, 2, 0], vec![2, 0, 1], vec![2, 1, 0]
        ]);
    }

    #[test]
    fn pit_recovers_swapped_order() {
        let x1 = noise(200, 5);
        let x2 = noise(200, 6);
        let (loss, perm) = pit_min_loss(&[x2.clone(), x1.clone()], &[x1.clone(), x2.clone()]).unwrap();
        assert_eq!(perm, vec![1, 0]);
        let (aligned, _) = pit_min_loss(&[x1.clone(), x2.clone()], &[x1, x2]).unwrap();
        assert_eq!(loss, aligned);
    }

    #[test]
    fn pit_single_pair_has_no_freedom() {
        let a = noise(50, 7);
        let b = noise(50, 8);
        let (loss, perm) = pit_min_loss(&[a.clone()], &[b.clone()]).unwrap();
        assert_eq!(perm, vec![0]);
        assert_eq!(loss, -si_sdr(&a, &b).unwrap());
        assert!(pit_min_loss(&[a.clone()], &[a, b]).is_err());
    }

    #[test]
    fn combined_loss_edge_cases() {
        let refs: Vec<Waveform> = (0..3).map(|i| noise(80, 10 + i)).collect();
        let est: Vec<Waveform> = (0..3).map(|i| noise(80, 20 + i)).collect();
        let full = combined_loss(&est, &refs, 3).unwrap();
        assert_eq!(full.pit_loss, 0.0);
        assert!(full.pit_permutation.is_empty());
        assert_eq!(full.total, full.guided_loss);

        let none = combined_loss(&est, &refs, 0).unwrap();
        assert_eq!(none.guided_loss, 0.0);
        assert_eq!(none.total, none.pit_loss);

        // one unguided stream: a fixed pairing
        let two = combined_loss(&est, &refs, 2).unwrap();
        let guided = -(si_sdr(&est[0], &refs[0]).unwrap() + si_sdr(&est[1], &refs[1]).unwrap()) / 2.0;
        let last = -si_sdr(&est[2], &refs[2]).unwrap();
        assert!((two.guided_loss - guided).abs() < 1e-12);
        assert!((two.total - (guided + last)).abs() < 1e-12);
        assert_eq!(two.pit_permutation, vec![0]);
    }

    #[test]
    fn improvement_examples() {
        let r = noise(120, 30);
        let other = noise(120, 31);
        let mix: Vec<f64> = r.samples().iter().zip(other.samples()).map(|(a, b)| a + b).collect();
        let mix = w(&mix);
        assert!(si_sdr_improvement(&mix, &r, &mix).unwrap().abs() < 1e-12);
        let perfect = si_sdr_improvement(&r, &r, &mix).unwrap();
        assert!(perfect >= 60.0 - si_sdr(&mix, &r).unwrap());
        // the interfering source alone is a worse estimate than the mixture
        assert!(si_sdr_improvement(&other, &r, &mix).unwrap() < 0.0);
    }
}
