//! Independent reference computations shared by the property tests and the
//! acceptance run.

use fvc_core::features::FeatureMatrix;
use fvc_core::gmm::DiagonalGmm;
use fvc_core::ivector::{accumulate_stats, init_t_matrix, m_step, min_divergence, train_t_matrix, BaumWelchStats, TotalVariabilityModel};
use fvc_core::math::NormalSampler;
use fvc_core::plda::{plda_score, plda_score_discrete_oracle, plda_score_integral_oracle, PldaModel};
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

/// Draws from a random diagonal mixture with `g` components in `m` dims.
pub fn mixture_data(seed: u64, n: usize, g: usize, m: usize) -> FeatureMatrix {
    let mut rng = NormalSampler::new(seed);
    let centres: Vec<Vec<f64>> = (0..g).map(|_| (0..m).map(|_| rng.normal(0.0, 3.0)).collect()).collect();
    let spreads: Vec<Vec<f64>> = (0..g).map(|_| (0..m).map(|_| 0.5 + rng.uniform()).collect()).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let c = rng.index(g);
            (0..m).map(|d| rng.normal(centres[c][d], spreads[c][d])).collect()
        })
        .collect();
    FeatureMatrix::from_rows(&rows).unwrap()
}

pub fn ks_distance_to_standard_normal(values: &[f64]) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// Every quantity of one T-training iteration for G = M = R = 1, written out
/// with plain scalars.
struct ScalarIteration {
    counts: Vec<f64>,
    firsts: Vec<f64>,
    precisions: Vec<f64>,
    means: Vec<f64>,
    covariances: Vec<f64>,
    weighted_second: f64,
    first_cross: f64,
    second_sum: f64,
    p_inv: f64,
    t_ml: f64,
    q: f64,
    t_md: f64,
}

fn scalar_iteration(mu: f64, var: f64, t: f64, recordings: &[Vec<f64>]) -> ScalarIteration {
    let counts: Vec<f64> = recordings.iter().map(|r| r.len() as f64).collect();
    let firsts: Vec<f64> = recordings.iter().map(|r| r.iter().map(|x| x - mu).sum()).collect();
    let precisions: Vec<f64> = counts.iter().map(|n| 1.0 + n * t * t / var).collect();
    let means: Vec<f64> = firsts.iter().zip(&precisions).map(|(f, l)| t * f / var / l).collect();
    let covariances: Vec<f64> = precisions.iter().map(|l| 1.0 / l).collect();
    let seconds: Vec<f64> = covariances.iter().zip(&means).map(|(c, m)| c + m * m).collect();
    let weighted_second: f64 = counts.iter().zip(&seconds).map(|(n, s)| n * s).sum();
    let first_cross: f64 = firsts.iter().zip(&means).map(|(f, m)| f * m).sum();
    let second_sum: f64 = seconds.iter().sum();
    let p_inv = second_sum / recordings.len() as f64;
    let t_ml = first_cross / weighted_second;
    let q = p_inv.sqrt();
    ScalarIteration {
        counts,
        firsts,
        precisions,
        means,
        covariances,
        weighted_second,
        first_cross,
        second_sum,
        p_inv,
        t_ml,
        q,
        t_md: t_ml * q,
    }
}

/// Largest relative disagreement between the library and the scalar oracle
/// over `instances` random problems, with the name of the worst quantity.
pub fn scalar_oracle_worst(instances: u64, seed: u64) -> (f64, &'static str) {
    let mut rng = NormalSampler::new(seed);
    let mut worst = (0.0, "none");
    let mut note = |a: f64, b: f64, what: &'static str| {
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        if rel > worst.0 || rel.is_nan() {
            worst = (rel, what);
        }
    };
    for instance in 0..instances {
        let mu = rng.normal(0.0, 2.0);
        let var = 0.2 + 3.0 * rng.uniform();
        let ubm = DiagonalGmm::new(vec![1.0], vec![vec![mu]], vec![vec![var]]).unwrap();
        let j = 2 + rng.index(6);
        let recordings: Vec<Vec<f64>> = (0..j)
            .map(|_| {
                let offset = rng.normal(0.0, 1.0);
                (0..1 + rng.index(40)).map(|_| rng.normal(mu + offset, var.sqrt())).collect()
            })
            .collect();
        let stats: Vec<BaumWelchStats> = recordings
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let fm = FeatureMatrix::from_rows(&r.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap();
                accumulate_stats(&ubm, &fm, &format!("r{i}")).unwrap()
            })
            .collect();

        let model = init_t_matrix(&ubm, 1, instance).unwrap();
        let o = scalar_iteration(mu, var, model.t[(0, 0)], &recordings);
        for (i, s) in stats.iter().enumerate() {
            note(s.counts[0], o.counts[i], "n");
            note(s.first[0], o.firsts[i], "f");
            let post = model.posterior(s).unwrap();
            note(post.precision[(0, 0)], o.precisions[i], "L");
            note(post.mean[0], o.means[i], "posterior mean");
            note(post.covariance[(0, 0)], o.covariances[i], "posterior covariance");
        }
        let sums = model.e_step(&stats).unwrap();
        note(sums.weighted_second[0][(0, 0)], o.weighted_second, "sum n <phi phi'>");
        note(sums.first_cross[(0, 0)], o.first_cross, "sum f <phi>");
        note(sums.second_sum[(0, 0)], o.second_sum, "sum <phi phi'>");
        note(sums.mean_second_moment()[(0, 0)], o.p_inv, "P^-1");
        let t_ml = m_step(&sums, 1, 1).unwrap();
        note(t_ml[(0, 0)], o.t_ml, "T_ML");
        let (t_md, q) = min_divergence(&t_ml, &sums).unwrap();
        note(q[(0, 0)], o.q, "Q");
        note(t_md[(0, 0)], o.t_md, "T_MD");
        let trained = train_t_matrix(&stats, &ubm, 1, 1, instance).unwrap();
        note(trained.model.t[(0, 0)], o.t_md, "trained T");
    }
    worst
}

/// Statistics generated from a known factor model with `phi ~ N(0, I)`.
pub fn synthetic_stats(truth: &TotalVariabilityModel, recordings: usize, seed: u64) -> Vec<BaumWelchStats> {
    let (g, m, r) = (truth.ubm.components(), truth.ubm.dim(), truth.rank());
    let mut rng = NormalSampler::new(seed);
    (0..recordings)
        .map(|j| {
            let phi: Vec<f64> = (0..r).map(|_| rng.standard()).collect();
            let counts: Vec<f64> = (0..g).map(|_| 20.0 + 30.0 * rng.uniform()).collect();
            let mut first = vec![0.0; g * m];
            for c in 0..g {
                for d in 0..m {
                    let row = c * m + d;
                    let shift: f64 = (0..r).map(|k| truth.t[(row, k)] * phi[k]).sum();
                    let noise = (counts[c] * truth.ubm.variance(c)[d]).sqrt() * rng.standard();
                    first[row] = counts[c] * shift + noise;
                }
            }
            BaumWelchStats {
                recording_id: format!("r{j}"),
                counts,
                first,
                dim: m,
            }
        })
        .collect()
}

/// G = 4, M = 3, R = 3 generating model.
pub fn toy_truth() -> TotalVariabilityModel {
    let (g, m) = (4, 3);
    let mut rng = NormalSampler::new(8);
    let ubm = DiagonalGmm::new(
        vec![0.25; g],
        (0..g).map(|c| vec![c as f64; m]).collect(),
        (0..g).map(|_| (0..m).map(|_| 0.5 + rng.uniform()).collect()).collect(),
    )
    .unwrap();
    let t = DMatrix::from_fn(g * m, 3, |_, _| rng.normal(0.0, 0.8));
    TotalVariabilityModel { ubm, t }
}

/// Largest entrywise distance of the trained second moment from identity.
pub fn trained_second_moment_gap() -> f64 {
    let truth = toy_truth();
    let stats = synthetic_stats(&truth, 1500, 1);
    let trained = train_t_matrix(&stats, &truth.ubm, 3, 20, 5).unwrap();
    let moment = trained.model.e_step(&stats).unwrap().mean_second_moment();
    (moment - DMatrix::<f64>::identity(3, 3)).amax()
}

pub struct Setting {
    pub mu_b: f64,
    pub var_w: f64,
    pub var_b: f64,
    pub v_q: f64,
    pub v_k: f64,
}

impl Setting {
    pub fn closed_form(&self) -> f64 {
        let v = |x: f64| DVector::from_element(1, x);
        plda_score(&PldaModel::scalar(self.mu_b, self.var_w, self.var_b), &v(self.v_q), &v(self.v_k)).unwrap()
    }
}

/// Embeddings fall within `spread` total standard deviations of the mean.
pub fn random_setting(rng: &mut NormalSampler, spread: f64) -> Setting {
    let mu_b = rng.normal(0.0, 2.0);
    // Small within variance leaves few sampled means near each point and
    // the Monte-Carlo sum too noisy for a 5% check.
    let var_w = 0.25 + 1.85 * rng.uniform();
    let var_b = 0.1 + 2.0 * rng.uniform();
    let sd = (var_w + var_b).sqrt();
    let mut draw = || mu_b + spread * sd * (2.0 * rng.uniform() - 1.0);
    let (v_q, v_k) = (draw(), draw());
    Setting { mu_b, var_w, var_b, v_q, v_k }
}

/// Worst relative LR gap between quadrature and the closed form.
pub fn quadrature_worst(settings: usize, seed: u64) -> f64 {
    let mut rng = NormalSampler::new(seed);
    (0..settings)
        .map(|_| {
            let s = random_setting(&mut rng, 3.0);
            let quad = plda_score_integral_oracle(s.mu_b, s.var_w, s.var_b, s.v_q, s.v_k);
            ((quad - s.closed_form()).exp() - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// Worst relative LR gap between the discrete sum over `means` sampled
/// speaker means and the closed form.
pub fn discrete_worst(settings: usize, means: usize, seed: u64) -> f64 {
    let mut rng = NormalSampler::new(seed);
    (0..settings)
        .map(|_| {
            let s = random_setting(&mut rng, 1.5);
            let sampled: Vec<f64> = (0..means).map(|_| rng.normal(s.mu_b, s.var_b.sqrt())).collect();
            let discrete = plda_score_discrete_oracle(&sampled, s.var_w, s.v_q, s.v_k).unwrap();
            ((discrete - s.closed_form()).exp() - 1.0).abs()
        })
        .fold(0.0, f64::max)
}
