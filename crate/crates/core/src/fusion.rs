//! Decision-level fusion of per-modality class confidences.
//!
//! The evidential-reasoning (ER) rule treats each modality's softmax
//! output as a body of evidence with a weight `w` and a reliability `r`.
//! With `c = 1/(1 + w - r)`, the weighted belief of class `n` is
//! `α_n = w·p_n` and the residual mass on the power set is `c·(1 - r)`.
//! The joint confidence is
//!
//! ```text
//! P_n = L·[Π_m c_m(1 - r_m + α_{n,m}) - Π_m c_m(1 - r_m)] / (1 - L·Π_m c_m(1 - r_m))
//! L   = [Σ_n Π_m c_m(1 - r_m + α_{n,m}) - (N - 1)·Π_m c_m(1 - r_m)]⁻¹
//! ```
//!
//! Consequences used throughout the tests: a single evidence comes back
//! unchanged, and with every `r_m = 1` the rule is Dempster's normalized
//! product regardless of `w`.
//!
//! Note that an evidence with `r = 0` still contributes `(1 + w·p_n)`
//! factors, so it only becomes neutral as `w → 0`.
//!
//! Global ignorance `p_Θ` is carried on [`Evidence`] but softmax heads
//! always emit 0 and the closed form above never reads it.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::ops::sigmoid_scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const DIST_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub p: Vec<f64>,
    pub p_global: f64,
    pub weight: f64,
    pub reliability: f64,
}

impl Evidence {
    pub fn new(p: Vec<f64>, weight: f64, reliability: f64) -> Result<Self> {
        Self::with_ignorance(p, 0.0, weight, reliability)
    }

    pub fn with_ignorance(p: Vec<f64>, p_global: f64, weight: f64, reliability: f64) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Contract("evidence over an empty frame".into()));
        }
        if p.iter().chain([&p_global]).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Contract(format!("negative or non-finite confidence in {p:?}")));
        }
        let total: f64 = p.iter().sum::<f64>() + p_global;
        if (total - 1.0).abs() > DIST_TOL {
            return Err(Error::Contract(format!("confidences sum to {total}, expected 1")));
        }
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::Contract(format!("weight {weight} outside (0, 1]")));
        }
        if !(0.0..=1.0).contains(&reliability) {
            return Err(Error::Contract(format!("reliability {reliability} outside [0, 1]")));
        }
        Ok(Self {
            p,
            p_global,
            weight,
            reliability,
        })
    }

    /// Evidence with `w = r = 1`; combination then reduces to Dempster's rule.
    pub fn certain(p: Vec<f64>) -> Result<Self> {
        Self::new(p, 1.0, 1.0)
    }

    pub fn classes(&self) -> usize {
        self.p.len()
    }

    /// `c_rw = 1 / (1 + w - r)`.
    pub fn c_rw(&self) -> f64 {
        1.0 / (1.0 + self.weight - self.reliability)
    }
}

/// Maps unconstrained raw values to a valid `(w, r)` pair: `w = sigmoid(raw_w)`
/// in `(0, 1)`, `r = sigmoid(raw_r)` in `(0, 1)`.
pub fn squash_weight_reliability(raw_w: f64, raw_r: f64) -> (f64, f64) {
    (sigmoid_scalar(raw_w), sigmoid_scalar(raw_r))
}

/// Intermediate quantities of the ER combination.
#[derive(Debug, Clone, PartialEq)]
pub struct ErState {
    pub c_rw: Vec<f64>,
    /// `Π_m c_m(1 - r_m + α_{n,m})` per class.
    pub class_products: Vec<f64>,
    /// `Π_m c_m(1 - r_m)`.
    pub residual_product: f64,
    /// Normalization factor `L`.
    pub norm: f64,
    pub joint: Vec<f64>,
}

fn check_frame(evidences: &[Evidence]) -> Result<usize> {
    let first = evidences
        .first()
        .ok_or_else(|| Error::Contract("combination needs at least one evidence".into()))?;
    let n = first.classes();
    if let Some(e) = evidences.iter().find(|e| e.classes() != n) {
        return Err(dim_err("combine", &[n], &[e.classes()]));
    }
    Ok(n)
}

pub fn er_state(evidences: &[Evidence]) -> Result<ErState> {
    let n = check_frame(evidences)?;
    let c_rw: Vec<f64> = evidences.iter().map(Evidence::c_rw).collect();
    let residual_product: f64 = evidences
        .iter()
        .zip(&c_rw)
        .map(|(e, c)| c * (1.0 - e.reliability))
        .product();
    let class_products: Vec<f64> = (0..n)
        .map(|k| {
            evidences
                .iter()
                .zip(&c_rw)
                .map(|(e, c)| c * (1.0 - e.reliability + e.weight * e.p[k]))
                .product()
        })
        .collect();
    let inv_norm = class_products.iter().sum::<f64>() - (n as f64 - 1.0) * residual_product;
    let denom_core = inv_norm - residual_product; // = Σ_n (class_n - residual)
    if !(denom_core > 0.0) || !inv_norm.is_finite() {
        let indices = evidences
            .iter()
            .enumerate()
            .filter(|(_, e)| e.reliability >= 1.0)
            .map(|(i, _)| i)
            .collect();
        return Err(Error::DegenerateCombination { indices });
    }
    let norm = 1.0 / inv_norm;
    let scale = 1.0 - norm * residual_product;
    let joint = class_products
        .iter()
        .map(|&b| (norm * (b - residual_product) / scale).max(0.0))
        .collect();
    Ok(ErState {
        c_rw,
        class_products,
        residual_product,
        norm,
        joint,
    })
}

/// Joint class confidences under the ER rule.
pub fn er_combine(evidences: &[Evidence]) -> Result<Vec<f64>> {
    er_state(evidences).map(|s| s.joint)
}

/// Dempster's orthogonal sum over singleton masses.
pub fn ds_combine(evidences: &[Evidence]) -> Result<Vec<f64>> {
    let n = check_frame(evidences)?;
    let prods: Vec<f64> = (0..n)
        .map(|k| evidences.iter().map(|e| e.p[k]).product())
        .collect();
    let total: f64 = prods.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateCombination {
            indices: (0..evidences.len()).collect(),
        });
    }
    Ok(prods.into_iter().map(|v| v / total).collect())
}

pub fn prob_average(evidences: &[Evidence]) -> Result<Vec<f64>> {
    let n = check_frame(evidences)?;
    let m = evidences.len() as f64;
    Ok((0..n)
        .map(|k| evidences.iter().map(|e| e.p[k]).sum::<f64>() / m)
        .collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn decide(joint: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in joint.iter().enumerate() {
        if v > joint[best] {
            best = i;
        }
    }
    best
}

/// Plurality of per-evidence argmaxes. Ties are broken by the highest
/// mean confidence the tied class received from the evidences that voted
/// for it, then by the lowest class id.
pub fn majority_vote(evidences: &[Evidence]) -> Result<usize> {
    let n = check_frame(evidences)?;
    let mut votes = vec![0usize; n];
    let mut conf = vec![0.0; n];
    for e in evidences {
        let k = decide(&e.p);
        votes[k] += 1;
        conf[k] += e.p[k];
    }
    let top = *votes.iter().max().expect("non-empty frame");
    let mut best: Option<usize> = None;
    for k in (0..n).filter(|&k| votes[k] == top) {
        let mean = conf[k] / votes[k] as f64;
        match best {
            Some(b) if mean <= conf[b] / votes[b] as f64 => {}
            _ => best = Some(k),
        }
    }
    Ok(best.expect("at least one class has the top vote"))
}

/// `softmax(W·concat(p_1..p_M) + b)` with `W: [M·N, N]` stored input-major.
pub fn learned_fusion(evidences: &[Evidence], w: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let n = check_frame(evidences)?;
    let flat: Vec<f64> = evidences.iter().flat_map(|e| e.p.iter().copied()).collect();
    if w.shape() != [flat.len(), n] || b.shape() != [n] {
        return Err(dim_err("learned_fusion", &[flat.len(), n], w.shape()));
    }
    let logits = crate::ops::linear(&Tensor::vector(flat), w, b)?;
    Ok(crate::ops::softmax(&logits, 0)?.into_data())
}

/// Fusion strategies compared by the ablation harness and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    Mv,
    Pa,
    Lf,
    Dst,
    Er,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 5] = [Self::Mv, Self::Pa, Self::Lf, Self::Dst, Self::Er];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mv => "MV",
            Self::Pa => "PA",
            Self::Lf => "LF",
            Self::Dst => "DST",
            Self::Er => "ER",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mv" => Some(Self::Mv),
            "pa" => Some(Self::Pa),
            "lf" => Some(Self::Lf),
            "dst" | "ds" => Some(Self::Dst),
            "er" => Some(Self::Er),
            _ => None,
        }
    }
}

/// Weights for [`FusionMethod::Lf`].
#[derive(Debug, Clone)]
pub struct LearnedFusionWeights {
    pub w: Tensor,
    pub b: Tensor,
}

/// Joint distribution for a given method. MV yields a one-hot vector
/// of the winning class. LF requires weights.
pub fn fuse(
    method: FusionMethod,
    evidences: &[Evidence],
    lf: Option<&LearnedFusionWeights>,
) -> Result<Vec<f64>> {
    match method {
        FusionMethod::Er => er_combine(evidences),
        FusionMethod::Dst => ds_combine(evidences),
        FusionMethod::Pa => prob_average(evidences),
        FusionMethod::Mv => {
            let n = check_frame(evidences)?;
            let k = majority_vote(evidences)?;
            Ok((0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
        }
        FusionMethod::Lf => {
            let lf = lf.ok_or_else(|| Error::Config("learned fusion needs trained weights".into()))?;
            learned_fusion(evidences, &lf.w, &lf.b)
        }
    }
}

/// One sample's evidence rows from an evidence CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceGroup {
    pub sample_id: String,
    pub modalities: Vec<String>,
    pub evidences: Vec<Evidence>,
}

/// Reads `sample_id, modality_id, p_1 .. p_N, w, r` rows, grouped by sample
/// in order of first appearance. A header row is skipped when its third
/// field is not a number. Errors name the 1-based row.
pub fn read_evidence_csv<R: std::io::Read>(reader: R) -> Result<Vec<EvidenceGroup>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut groups: Vec<EvidenceGroup> = Vec::new();
    let mut width = None;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Malformed(format!("row {row}: {e}")))?;
        if i == 0 && rec.get(2).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if rec.len() < 5 {
            return Err(Error::Malformed(format!("row {row}: expected sample_id, modality_id, probabilities, w, r")));
        }
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Malformed(format!("row {row}: {} fields, earlier rows have {}", rec.len(), width.unwrap_or(0))));
        }
        let nums = rec
            .iter()
            .skip(2)
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| Error::Malformed(format!("row {row}: non-numeric probability, weight or reliability")))?;
        let n = nums.len() - 2;
        let ev = Evidence::new(nums[..n].to_vec(), nums[n], nums[n + 1])
            .map_err(|e| Error::Malformed(format!("row {row}: {e}")))?;
        let id = rec[0].to_string();
        match groups.iter_mut().find(|g| g.sample_id == id) {
            Some(g) => {
                g.modalities.push(rec[1].to_string());
                g.evidences.push(ev);
            }
            None => groups.push(EvidenceGroup {
                sample_id: id,
                modalities: vec![rec[1].to_string()],
                evidences: vec![ev],
            }),
        }
    }
    if groups.is_empty() {
        return Err(Error::Empty("evidence file has no rows".into()));
    }
    Ok(groups)
}

/// ER combination on the tape, differentiable in `p`, `w` and `r`.
///
/// `ps[m]` are `[N]` distributions, `ws[m]` and `rs[m]` are `[1]` values
/// already inside their valid ranges.
pub fn er_combine_tape(tape: &mut Tape, ps: &[Var], ws: &[Var], rs: &[Var]) -> Result<Var> {
    if ps.is_empty() || ps.len() != ws.len() || ps.len() != rs.len() {
        return Err(Error::Contract("er_combine_tape needs matching non-empty inputs".into()));
    }
    let n = tape.shape(ps[0])[0];
    let mut class_prod: Option<Var> = None;
    let mut resid_prod: Option<Var> = None;
    for m in 0..ps.len() {
        if tape.shape(ps[m]) != [n] {
            return Err(dim_err("er_combine", &[n], tape.shape(ps[m])));
        }
        // c = 1 / (1 + w - r)
        let wr = tape.sub(ws[m], rs[m])?;
        let wr1 = tape.shift(wr, 1.0);
        let c = tape.recip(wr1);
        // 1 - r
        let neg_r = tape.scale(rs[m], -1.0);
        let one_minus_r = tape.shift(neg_r, 1.0);
        let resid = tape.mul(c, one_minus_r)?;
        // c (1 - r + w p_n)
        let w_n = tape.expand(ws[m], n)?;
        let alpha = tape.mul(w_n, ps[m])?;
        let omr_n = tape.expand(one_minus_r, n)?;
        let inner = tape.add(omr_n, alpha)?;
        let c_n = tape.expand(c, n)?;
        let term = tape.mul(c_n, inner)?;
        class_prod = Some(match class_prod {
            None => term,
            Some(acc) => tape.mul(acc, term)?,
        });
        resid_prod = Some(match resid_prod {
            None => resid,
            Some(acc) => tape.mul(acc, resid)?,
        });
    }
    let class_prod = class_prod.expect("non-empty");
    let resid_prod = resid_prod.expect("non-empty");
    // L = [Σ_n class_n - (N-1) resid]^-1
    let sum_class = tape.sum(class_prod);
    let resid_scaled = tape.scale(resid_prod, n as f64 - 1.0);
    let inv_norm = tape.sub(sum_class, resid_scaled)?;
    let norm = tape.recip(inv_norm);
    // P_n = L (class_n - resid) / (1 - L resid)
    let resid_n = tape.expand(resid_prod, n)?;
    let support = tape.sub(class_prod, resid_n)?;
    let norm_n = tape.expand(norm, n)?;
    let numer = tape.mul(norm_n, support)?;
    let l_resid = tape.mul(norm, resid_prod)?;
    let neg = tape.scale(l_resid, -1.0);
    let denom = tape.shift(neg, 1.0);
    let denom_n = tape.expand(denom, n)?;
    tape.div(numer, denom_n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::grad_check_with;

    /// ER with the `c` factors cancelled by hand:
    /// `P_n ∝ Π_m(1 - r_m + w_m p_{n,m}) - Π_m(1 - r_m)`.
    fn er_reduced(evs: &[Evidence]) -> Vec<f64> {
        let n = evs[0].p.len();
        let base: f64 = evs.iter().map(|e| 1.0 - e.reliability).product();
        let s: Vec<f64> = (0..n)
            .map(|k| {
                evs.iter()
                    .map(|e| 1.0 - e.reliability + e.weight * e.p[k])
                    .product::<f64>()
                    - base
            })
            .collect();
        let t: f64 = s.iter().sum();
        s.iter().map(|v| v / t).collect()
    }

    fn random_dist(rng: &mut Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.range(0.01, 1.0)).collect();
        let t: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / t).collect()
    }

    fn random_evidence(rng: &mut Rng, n: usize) -> Evidence {
        let p = random_dist(rng, n);
        Evidence::new(p, rng.range(0.05, 1.0), rng.range(0.0, 1.0)).unwrap()
    }

    #[test]
    fn evidence_validation() {
        assert!(Evidence::new(vec![0.5, 0.5], 1.0, 1.0).is_ok());
        assert!(Evidence::new(vec![0.5, 0.6], 1.0, 1.0).is_err());
        assert!(Evidence::new(vec![0.5, 0.5], 0.0, 1.0).is_err());
        assert!(Evidence::new(vec![0.5, 0.5], 1.0, 1.1).is_err());
        assert!(Evidence::with_ignorance(vec![0.4, 0.4], 0.2, 0.5, 0.5).is_ok());
    }

    #[test]
    fn single_evidence_identity() {
        for (w, r) in [(1.0, 1.0), (0.3, 0.9), (1.0, 0.0), (0.5, 0.5)] {
            let e = Evidence::new(vec![0.7, 0.2, 0.1], w, r).unwrap();
            let j = er_combine(&[e]).unwrap();
            for (a, b) in j.iter().zip([0.7, 0.2, 0.1]) {
                assert!((a - b).abs() <= 1e-12, "w={w} r={r}: {j:?}");
            }
        }
    }

    #[test]
    fn fully_reliable_pair_is_normalized_product() {
        let e = Evidence::certain(vec![0.9, 0.1]).unwrap();
        let j = er_combine(&[e.clone(), e]).unwrap();
        assert!((j[0] - 0.81 / 0.82).abs() < 1e-12);
        assert!((j[1] - 0.01 / 0.82).abs() < 1e-12);
        assert!((j[0] - 0.98780).abs() < 1e-5);
    }

    #[test]
    fn literal_form_matches_reduced_form() {
        let mut rng = Rng::seed(21);
        for _ in 0..200 {
            let m = 1 + rng.below(4);
            let evs: Vec<_> = (0..m).map(|_| random_evidence(&mut rng, 3)).collect();
            let a = er_combine(&evs).unwrap();
            let b = er_reduced(&evs);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unreliable_evidence_is_neutral_only_in_the_zero_weight_limit() {
        let e1 = Evidence::new(vec![0.6, 0.3, 0.1], 0.8, 0.7).unwrap();
        let e3 = Evidence::new(vec![0.2, 0.5, 0.3], 0.6, 0.9).unwrap();
        let base = er_combine(&[e1.clone(), e3.clone()]).unwrap();
        let gap = |w: f64| {
            let e2 = Evidence::new(vec![0.1, 0.1, 0.8], w, 0.0).unwrap();
            let j = er_combine(&[e1.clone(), e2, e3.clone()]).unwrap();
            j.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        assert!(gap(1.0) > 1e-3);
        assert!(gap(1e-9) < 1e-8);
        assert!(gap(1e-3) < gap(1e-1));
    }

    #[test]
    fn degenerate_conflict_reports_indices() {
        let a = Evidence::certain(vec![1.0, 0.0]).unwrap();
        let b = Evidence::certain(vec![0.0, 1.0]).unwrap();
        match er_combine(&[a.clone(), b.clone()]) {
            Err(Error::DegenerateCombination { indices }) => assert_eq!(indices, vec![0, 1]),
            other => panic!("expected degenerate error, got {other:?}"),
        }
        assert!(ds_combine(&[a, b]).is_err());
    }

    #[test]
    fn er_softens_zadeh_conflict() {
        let a = Evidence::certain(vec![0.99, 0.01, 0.0]).unwrap();
        let b = Evidence::certain(vec![0.0, 0.01, 0.99]).unwrap();
        let ds = ds_combine(&[a.clone(), b.clone()]).unwrap();
        assert!((ds[1] - 1.0).abs() < 1e-12);
        let a = Evidence::new(a.p, 1.0, 0.8).unwrap();
        let b = Evidence::new(b.p, 1.0, 0.8).unwrap();
        let er = er_combine(&[a, b]).unwrap();
        assert!(er[1] < 0.1, "{er:?}");
    }

    #[test]
    fn ds_uniform_is_neutral() {
        let u = Evidence::certain(vec![1.0 / 3.0; 3]).unwrap();
        let e = Evidence::certain(vec![0.5, 0.3, 0.2]).unwrap();
        let j = ds_combine(&[u, e]).unwrap();
        for (a, b) in j.iter().zip([0.5, 0.3, 0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn majority_vote_rules() {
        let ev = |p: Vec<f64>| Evidence::certain(p).unwrap();
        let a = ev(vec![0.6, 0.3, 0.1]);
        let b = ev(vec![0.2, 0.7, 0.1]);
        assert_eq!(majority_vote(&[a.clone(), a.clone(), b.clone()]).unwrap(), 0);
        assert_eq!(majority_vote(&[b]).unwrap(), 1);
    }

    #[test]
    fn three_way_tie_goes_to_most_confident_voter() {
        let ev = |p: Vec<f64>| Evidence::certain(p).unwrap();
        let a = ev(vec![0.5, 0.3, 0.2]);
        let b = ev(vec![0.1, 0.6, 0.3]);
        let c = ev(vec![0.3, 0.3, 0.4]);
        assert_eq!(majority_vote(&[a.clone(), b.clone(), c.clone()]).unwrap(), 1);
        // full tie on confidence falls back to the lowest id
        let d = ev(vec![0.3, 0.5, 0.2]);
        assert_eq!(majority_vote(&[a, d]).unwrap(), 0);
    }

    #[test]
    fn evidence_csv_parsing() {
        let text = "sample_id,modality_id,p1,p2,p3,w,r\ns1,image,0.7,0.2,0.1,0.9,0.8\ns2,image,0.1,0.1,0.8,1,1\ns1,audio,0.5,0.3,0.2,0.5,1\n";
        let g = read_evidence_csv(text.as_bytes()).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].sample_id, "s1");
        assert_eq!(g[0].modalities, vec!["image", "audio"]);
        assert_eq!(g[0].evidences[1].p, vec![0.5, 0.3, 0.2]);
        let bad_row = |text: &str| match read_evidence_csv(text.as_bytes()) {
            Err(Error::Malformed(m)) => m,
            other => panic!("{other:?}"),
        };
        assert!(bad_row("a,x,0.5,0.5,1,1\nb,x,0.5,zz,1,1\n").contains("row 2"));
        assert!(bad_row("a,x,0.5,0.6,1,1\n").contains("row 1"));
        assert!(bad_row("a,x,0.5,0.5,1,1\nb,x,0.5,0.25,0.25,1,1\n").contains("row 2"));
        assert!(matches!(read_evidence_csv("h1,h2,h3\n".as_bytes()), Err(Error::Empty(_))));
    }

    #[test]
    fn prob_average_and_decide() {
        let a = Evidence::certain(vec![1.0, 0.0, 0.0]).unwrap();
        let b = Evidence::certain(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(prob_average(&[a.clone(), b]).unwrap(), vec![0.5, 0.5, 0.0]);
        assert_eq!(prob_average(&[a.clone(), a]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(decide(&[0.2, 0.5, 0.3]), 1);
        assert_eq!(decide(&[0.5, 0.5, 0.0]), 0);
    }

    #[test]
    fn learned_fusion_zero_weights_is_uniform() {
        let a = Evidence::certain(vec![0.7, 0.2, 0.1]).unwrap();
        let j = learned_fusion(&[a.clone(), a.clone()], &Tensor::zeros(&[6, 3]), &Tensor::zeros(&[3])).unwrap();
        for v in j {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(learned_fusion(&[a], &Tensor::zeros(&[6, 3]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn tape_er_matches_plain_er() {
        let mut rng = Rng::seed(22);
        for _ in 0..50 {
            let evs: Vec<_> = (0..3).map(|_| random_evidence(&mut rng, 3)).collect();
            let mut t = Tape::new();
            let ps: Vec<_> = evs.iter().map(|e| t.leaf(Tensor::vector(e.p.clone()))).collect();
            let ws: Vec<_> = evs.iter().map(|e| t.leaf(Tensor::scalar(e.weight))).collect();
            let rs: Vec<_> = evs.iter().map(|e| t.leaf(Tensor::scalar(e.reliability))).collect();
            let j = er_combine_tape(&mut t, &ps, &ws, &rs).unwrap();
            let want = er_combine(&evs).unwrap();
            for (a, b) in t.value(j).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_er_gradients_match_finite_differences() {
        let mut rng = Rng::seed(23);
        // pack p (3x3), w (3), r (3) into one 15-vector
        for _ in 0..10 {
            let evs: Vec<_> = (0..3).map(|_| random_evidence(&mut rng, 3)).collect();
            let mut flat = Vec::new();
            for e in &evs {
                flat.extend(&e.p);
            }
            flat.extend(evs.iter().map(|e| e.weight.min(0.95)));
            flat.extend(evs.iter().map(|e| e.reliability.clamp(0.05, 0.95)));
            let coef = rng.normal_tensor(&[3], 1.0);
            let err = grad_check_with(&Tensor::vector(flat), 1e-6, 1e-9, None, |t, x| {
                let mut ps = Vec::new();
                let mut ws = Vec::new();
                let mut rs = Vec::new();
                let x9 = t.reshape(x, &[15])?;
                for m in 0..3 {
                    ps.push(pick_range(t, x9, m * 3, 3)?);
                    ws.push(t.pick(x9, 9 + m)?);
                    rs.push(t.pick(x9, 12 + m)?);
                }
                let j = er_combine_tape(t, &ps, &ws, &rs)?;
                let c = t.constant(coef.clone());
                let y = t.mul(j, c)?;
                Ok(t.sum(y))
            })
            .unwrap();
            assert!(err <= 1e-5, "{err}");
        }
    }

    fn pick_range(t: &mut Tape, x: Var, start: usize, len: usize) -> Result<Var> {
        let parts: Vec<Var> = (start..start + len).map(|i| t.pick(x, i)).collect::<Result<_>>()?;
        t.concat(&parts, 0)
    }
}
