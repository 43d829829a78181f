//! Preference-pair selection, DPO losses and the low-rank weight update.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PreferenceError {
    #[error("need at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("all composite scores are equal ({0}); no preference signal")]
    NoPreference(f64),
    #[error("score weights must be non-negative with at least one positive")]
    Weights,
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("beta must be positive, got {0}")]
    Beta(f64),
    #[error("shape mismatch: {what} is {actual:?}, expected {expected:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipScores {
    pub sync_c: f64,
    pub hand_reward: f64,
    pub video_reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreWeights {
    pub w_sync: f64,
    pub w_hand: f64,
    pub w_video: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { w_sync: 1.0, w_hand: 1.0, w_video: 1.0 }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<(), PreferenceError> {
        let w = [self.w_sync, self.w_hand, self.w_video];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().all(|&x| x == 0.0) {
            return Err(PreferenceError::Weights);
        }
        Ok(())
    }
}

pub fn composite_score(s: &ClipScores, w: &ScoreWeights) -> f64 {
    w.w_sync * s.sync_c + w.w_hand * s.hand_reward + w.w_video * s.video_reward
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub winner: usize,
    pub loser: usize,
    pub composites: Vec<f64>,
}

/// Highest composite wins, lowest loses; ties go to the lowest index.
pub fn select_pair(candidates: &[ClipScores], w: &ScoreWeights) -> Result<PreferencePair, PreferenceError> {
    w.validate()?;
    if candidates.len() < 2 {
        return Err(PreferenceError::TooFewCandidates(candidates.len()));
    }
    let composites: Vec<f64> = candidates.iter().map(|c| composite_score(c, w)).collect();
    if composites.iter().any(|c| !c.is_finite()) {
        return Err(PreferenceError::NonFinite("candidate scores"));
    }
    let mut winner = 0;
    let mut loser = 0;
    for (i, &c) in composites.iter().enumerate() {
        if c > composites[winner] {
            winner = i;
        }
        if c < composites[loser] {
            loser = i;
        }
    }
    if composites[winner] == composites[loser] {
        return Err(PreferenceError::NoPreference(composites[winner]));
    }
    Ok(PreferencePair { winner, loser, composites })
}

/// `-log σ(x)`, evaluated as `log(1 + e^{-x})` without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoInputs {
    pub logp_w_policy: f64,
    pub logp_w_ref: f64,
    pub logp_l_policy: f64,
    pub logp_l_ref: f64,
    pub beta: f64,
}

/// `-log σ(β [(log π_w - log ref_w) - (log π_l - log ref_l)])`.
pub fn dpo_loss(inp: &DpoInputs) -> Result<f64, PreferenceError> {
    let vals = [inp.logp_w_policy, inp.logp_w_ref, inp.logp_l_policy, inp.logp_l_ref, inp.beta];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(PreferenceError::NonFinite("log-likelihoods"));
    }
    if !(inp.beta > 0.0) {
        return Err(PreferenceError::Beta(inp.beta));
    }
    let margin = (inp.logp_w_policy - inp.logp_w_ref) - (inp.logp_l_policy - inp.logp_l_ref);
    Ok(neg_log_sigmoid(inp.beta * margin))
}

/// Velocity fields for the preferred (`w`) and dispreferred (`l`) samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDpoInputs {
    pub v_true_w: Array2<f64>,
    pub v_pred_w: Array2<f64>,
    pub v_ref_w: Array2<f64>,
    pub v_true_l: Array2<f64>,
    pub v_pred_l: Array2<f64>,
    pub v_ref_l: Array2<f64>,
    pub beta_t: f64,
}

fn sq_dist(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let mut s = 0.0;
    Zip::from(&a).and(&b).for_each(|&x, &y| s += (x - y).powi(2));
    s
}

impl FlowDpoInputs {
    fn validate(&self) -> Result<(), PreferenceError> {
        if !(self.beta_t > 0.0 && self.beta_t.is_finite()) {
            return Err(PreferenceError::Beta(self.beta_t));
        }
        let expected = self.v_true_w.dim();
        let fields = [
            ("v_pred_w", &self.v_pred_w),
            ("v_ref_w", &self.v_ref_w),
            ("v_true_l", &self.v_true_l),
            ("v_pred_l", &self.v_pred_l),
            ("v_ref_l", &self.v_ref_l),
        ];
        for (what, m) in fields {
            if m.dim() != expected {
                return Err(PreferenceError::Shape { what, expected, actual: m.dim() });
            }
        }
        Ok(())
    }

    /// Argument `x` of `-log σ(x)`; squared norms are summed over elements.
    pub fn logit(&self) -> Result<f64, PreferenceError> {
        self.validate()?;
        let winner = sq_dist(self.v_true_w.view(), self.v_pred_w.view()) - sq_dist(self.v_true_w.view(), self.v_ref_w.view());
        let loser = sq_dist(self.v_true_l.view(), self.v_pred_l.view()) - sq_dist(self.v_true_l.view(), self.v_ref_l.view());
        let x = -(self.beta_t / 2.0) * (winner - loser);
        if !x.is_finite() {
            return Err(PreferenceError::NonFinite("velocity errors"));
        }
        Ok(x)
    }
}

pub fn flow_dpo_loss(inp: &FlowDpoInputs) -> Result<f64, PreferenceError> {
    Ok(neg_log_sigmoid(inp.logit()?))
}

/// `W + A Bᵀ` for `W: m×n`, `A: m×r`, `B: n×r`.
pub fn lora_apply(
    w: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
) -> Result<Array2<f64>, PreferenceError> {
    let (m, n) = w.dim();
    let r = a.ncols();
    if a.nrows() != m {
        return Err(PreferenceError::Shape { what: "A", expected: (m, r), actual: a.dim() });
    }
    if b.dim() != (n, r) {
        return Err(PreferenceError::Shape { what: "B", expected: (n, r), actual: b.dim() });
    }
    Ok(&w + &a.dot(&b.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn scores(c: &[f64]) -> Vec<ClipScores> {
        c.iter().map(|&s| ClipScores { sync_c: s, hand_reward: 0.0, video_reward: 0.0 }).collect()
    }

    /// −log σ(1) by direct evaluation of the logistic function.
    fn reference_nls1() -> f64 {
        -(1.0 / (1.0 + (-1.0f64).exp())).ln()
    }

    #[test]
    fn composites() {
        let s = ClipScores { sync_c: 1.0, hand_reward: 2.0, video_reward: 3.0 };
        assert_eq!(composite_score(&s, &ScoreWeights::default()), 6.0);
        let zero = ClipScores { sync_c: 0.0, hand_reward: 0.0, video_reward: 0.0 };
        assert_eq!(composite_score(&zero, &ScoreWeights::default()), 0.0);
        let w = ScoreWeights { w_sync: 1.0, w_hand: 0.0, w_video: 0.0 };
        assert_eq!(composite_score(&s, &w), 1.0);
    }

    #[test]
    fn pair_selection() {
        let w = ScoreWeights::default();
        let p = select_pair(&scores(&[3.0, 1.0, 4.0, 2.0]), &w).unwrap();
        assert_eq!((p.winner, p.loser), (2, 1));
        let p = select_pair(&scores(&[5.0, 5.0, 1.0, 1.0]), &w).unwrap();
        assert_eq!((p.winner, p.loser), (0, 2));
        assert_eq!(select_pair(&scores(&[2.0; 4]), &w), Err(PreferenceError::NoPreference(2.0)));
        assert_eq!(select_pair(&scores(&[2.0]), &w), Err(PreferenceError::TooFewCandidates(1)));
        let bad = ScoreWeights { w_sync: 0.0, w_hand: 0.0, w_video: 0.0 };
        assert_eq!(select_pair(&scores(&[1.0, 2.0]), &bad), Err(PreferenceError::Weights));
    }

    #[test]
    fn dpo_anchors() {
        let same = DpoInputs { logp_w_policy: -3.0, logp_w_ref: -3.0, logp_l_policy: -7.5, logp_l_ref: -7.5, beta: 0.1 };
        assert!((dpo_loss(&same).unwrap() - LN2).abs() < 1e-12);
        let one = DpoInputs { logp_w_policy: 1.0, logp_w_ref: 0.0, logp_l_policy: 0.0, logp_l_ref: 0.0, beta: 1.0 };
        let l = dpo_loss(&one).unwrap();
        assert!((l - reference_nls1()).abs() < 1e-12);
        assert!((l - 0.313262).abs() < 1e-6);
        assert!(dpo_loss(&DpoInputs { beta: 0.0, ..one }).is_err());
        assert!(dpo_loss(&DpoInputs { logp_w_policy: f64::NAN, ..one }).is_err());
    }

    #[test]
    fn dpo_large_margin_goes_to_zero() {
        let mut prev = f64::INFINITY;
        for m in [0.0, 1.0, 10.0, 100.0, 700.0] {
            let l = dpo_loss(&DpoInputs { logp_w_policy: m, logp_w_ref: 0.0, logp_l_policy: 0.0, logp_l_ref: 0.0, beta: 1.0 }).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-300);
    }

    #[test]
    fn stable_for_large_logits() {
        for x in [-700.0, -50.0, -1.0, 0.0, 1.0, 50.0, 700.0] {
            let v = neg_log_sigmoid(x);
            assert!(v.is_finite() && v >= 0.0, "x={x} -> {v}");
        }
        assert!((neg_log_sigmoid(-700.0) - 700.0).abs() < 1e-9);
        assert_eq!(neg_log_sigmoid(0.0), LN2);
    }

    fn flow_inputs() -> FlowDpoInputs {
        // winner: policy exact, reference off by one element; loser balanced
        let truth = array![[1.0, 2.0], [3.0, 4.0]];
        let mut v_ref_w = truth.clone();
        v_ref_w[[0, 1]] += 1.0;
        let v_true_l = array![[0.5, -0.5], [1.5, 0.0]];
        let mut off = v_true_l.clone();
        off[[1, 0]] -= 2.0;
        FlowDpoInputs {
            v_true_w: truth.clone(),
            v_pred_w: truth,
            v_ref_w,
            v_true_l,
            v_pred_l: off.clone(),
            v_ref_l: off,
            beta_t: 2.0,
        }
    }

    #[test]
    fn flow_dpo_anchors() {
        let inp = flow_inputs();
        assert!((flow_dpo_loss(&inp).unwrap() - reference_nls1()).abs() < 1e-12);
        let equal = FlowDpoInputs { v_pred_w: inp.v_ref_w.clone(), v_pred_l: inp.v_ref_l.clone(), ..inp.clone() };
        assert!((flow_dpo_loss(&equal).unwrap() - LN2).abs() < 1e-12);
    }

    #[test]
    fn flow_dpo_swap_negates_logit() {
        let inp = flow_inputs();
        let swapped = FlowDpoInputs {
            v_true_w: inp.v_true_l.clone(),
            v_pred_w: inp.v_pred_l.clone(),
            v_ref_w: inp.v_ref_l.clone(),
            v_true_l: inp.v_true_w.clone(),
            v_pred_l: inp.v_pred_w.clone(),
            v_ref_l: inp.v_ref_w.clone(),
            beta_t: inp.beta_t,
        };
        let x = inp.logit().unwrap();
        assert_eq!(swapped.logit().unwrap(), -x);
        assert!((flow_dpo_loss(&swapped).unwrap() - neg_log_sigmoid(-x)).abs() < 1e-15);
    }

    #[test]
    fn flow_dpo_shape_checked() {
        let inp = FlowDpoInputs { v_ref_l: Array2::zeros((3, 2)), ..flow_inputs() };
        assert!(matches!(flow_dpo_loss(&inp), Err(PreferenceError::Shape { what: "v_ref_l", .. })));
        assert!(matches!(flow_dpo_loss(&FlowDpoInputs { beta_t: -1.0, ..flow_inputs() }), Err(PreferenceError::Beta(_))));
    }

    #[test]
    fn lora_examples() {
        let w = Array2::from_shape_fn((2, 2), |(i, j)| (i * 2 + j) as f64);
        assert_eq!(lora_apply(w.view(), Array2::zeros((2, 1)).view(), array![[3.0], [4.0]].view()).unwrap(), w);
        let out = lora_apply(Array2::zeros((2, 2)).view(), array![[1.0], [0.0]].view(), array![[0.0], [1.0]].view()).unwrap();
        assert_eq!(out, array![[0.0, 1.0], [0.0, 0.0]]);
        assert!(lora_apply(w.view(), Array2::zeros((3, 1)).view(), Array2::zeros((2, 1)).view()).is_err());
        assert!(lora_apply(w.view(), Array2::zeros((2, 1)).view(), Array2::zeros((2, 2)).view()).is_err());
    }

    proptest! {
        #[test]
        fn selection_invariant_under_rescaling(
            c in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), 4),
            w in (0.1f64..3.0, 0.1f64..3.0, 0.1f64..3.0),
            exp in -20i32..20,
        ) {
            let cands: Vec<ClipScores> = c.iter().map(|&(a, b, d)| ClipScores { sync_c: a, hand_reward: b, video_reward: d }).collect();
            let w = ScoreWeights { w_sync: w.0, w_hand: w.1, w_video: w.2 };
            let k = 2f64.powi(exp);
            let scaled = ScoreWeights { w_sync: k * w.w_sync, w_hand: k * w.w_hand, w_video: k * w.w_video };
            let (a, b) = (select_pair(&cands, &w), select_pair(&cands, &scaled));
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert_eq!((a.winner, a.loser), (b.winner, b.loser));
            }
        }

        #[test]
        fn dpo_monotone_in_advantages(base in -5.0f64..5.0, lref in -5.0f64..5.0, d in 0.01f64..2.0, beta in 0.05f64..3.0) {
            let inp = DpoInputs { logp_w_policy: base, logp_w_ref: 0.0, logp_l_policy: lref, logp_l_ref: 0.0, beta };
            let l0 = dpo_loss(&inp).unwrap();
            let better_w = dpo_loss(&DpoInputs { logp_w_policy: base + d, ..inp }).unwrap();
            let better_l = dpo_loss(&DpoInputs { logp_l_policy: lref + d, ..inp }).unwrap();
            prop_assert!(better_w < l0);
            prop_assert!(better_l > l0);
        }

        #[test]
        fn flow_dpo_monotone(e in 0.0f64..2.0, d in 0.05f64..1.0) {
            // shrinking the policy's winner error lowers the loss,
            // shrinking its loser error raises it
            let mk = |ew: f64, el: f64| FlowDpoInputs {
                v_true_w: array![[0.0]], v_pred_w: array![[ew]], v_ref_w: array![[1.0]],
                v_true_l: array![[0.0]], v_pred_l: array![[el]], v_ref_l: array![[1.0]],
                beta_t: 1.0,
            };
            let l0 = flow_dpo_loss(&mk(e + d, e + d)).unwrap();
            prop_assert!(flow_dpo_loss(&mk(e, e + d)).unwrap() < l0);
            prop_assert!(flow_dpo_loss(&mk(e + d, e)).unwrap() > l0);
        }

        #[test]
        fn lora_is_additive(vals in prop::collection::vec(-4.0f64..4.0, 3 * 2 + 3 * 2 + 2 * 2)) {
            let w = Array2::from_shape_vec((3, 2), vals[..6].to_vec()).unwrap();
            let a = Array2::from_shape_vec((3, 2), vals[6..12].to_vec()).unwrap();
            let b = Array2::from_shape_vec((2, 2), vals[12..].to_vec()).unwrap();
            let there = lora_apply(w.view(), a.view(), b.view()).unwrap();
            let back = lora_apply(there.view(), (-&a).view(), b.view()).unwrap();
            for (x, y) in back.iter().zip(&w) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
