//! Inverse dynamics: recovering the action that connects two consecutive
//! states, optionally given the latent context of that transition.
//!
//! The latent belongs to the *transition*, i.e. the successor step's context —
//! the same slot the planner has in hand when it turns a predicted state pair
//! into an action.

use crate::envsim::Dataset;
use crate::error::{CoreError, Result};
use crate::latentid::{posterior_infer_frames, Stage1Nets};
use crate::numerics::{
    AdamState, BindIndex, GradAccum, Mlp, ParamVisit, Rng, Tape, Tensor,
};

const HIDDEN: usize = 64;
const STD_FLOOR: f64 = 1e-6;

/// One supervised inverse-dynamics example.
#[derive(Debug, Clone)]
pub struct IdmSample {
    pub s: Vec<f64>,
    pub s_next: Vec<f64>,
    /// Context of the transition, when the model is latent-conditioned.
    pub latent: Option<Vec<f64>>,
    pub a: Vec<f64>,
}

/// MLP from `[s, s', c?]` to the connecting action, with internal z-scoring
/// of inputs and outputs.
#[derive(Debug, Clone)]
pub struct IdmNet {
    pub d_s: usize,
    pub d_a: usize,
    pub latent_dim: Option<usize>,
    in_mean: Vec<f64>,
    in_std: Vec<f64>,
    out_mean: Vec<f64>,
    out_std: Vec<f64>,
    net: Mlp,
}

impl IdmNet {
    pub fn init(rng: &mut Rng, d_s: usize, d_a: usize, latent_dim: Option<usize>) -> IdmNet {
        let in_dim = 2 * d_s + latent_dim.unwrap_or(0);
        IdmNet {
            d_s,
            d_a,
            latent_dim,
            in_mean: vec![0.0; in_dim],
            in_std: vec![1.0; in_dim],
            out_mean: vec![0.0; d_a],
            out_std: vec![1.0; d_a],
            net: Mlp::init(rng, &[in_dim, HIDDEN, HIDDEN, d_a]),
        }
    }

    fn in_dim(&self) -> usize {
        2 * self.d_s + self.latent_dim.unwrap_or(0)
    }

    fn assemble(&self, s: &[f64], s_next: &[f64], latent: Option<&[f64]>) -> Result<Vec<f64>> {
        if s.len() != self.d_s || s_next.len() != self.d_s {
            return Err(CoreError::shape(format!(
                "state pair has dims {}/{}, model expects {}",
                s.len(),
                s_next.len(),
                self.d_s
            )));
        }
        match (self.latent_dim, latent) {
            (None, None) => {}
            (Some(d), Some(c)) if c.len() == d => {}
            (Some(d), Some(c)) => {
                return Err(CoreError::shape(format!(
                    "latent has {} dims, model expects {d}",
                    c.len()
                )));
            }
            (Some(_), None) => {
                return Err(CoreError::contract("latent-conditioned model called without one"))
            }
            (None, Some(_)) => {
                return Err(CoreError::contract("latent-free model handed a latent"))
            }
        }
        let mut x: Vec<f64> = s.iter().chain(s_next).copied().collect();
        if let Some(c) = latent {
            x.extend_from_slice(c);
        }
        Ok(x)
    }

    /// Predicts the action taking `s` to `s_next`.
    pub fn infer(&self, s: &[f64], s_next: &[f64], latent: Option<&[f64]>) -> Result<Vec<f64>> {
        let x = self.assemble(s, s_next, latent)?;
        let z: Vec<f64> = x
            .iter()
            .zip(self.in_mean.iter().zip(&self.in_std))
            .map(|(v, (m, sd))| (v - m) / sd)
            .collect();
        let mut tape = Tape::new();
        let mut ix = BindIndex::new();
        let vars = self.net.bind(&mut tape, &mut ix, "net", true)?;
        let input = tape.constant_vec(z)?;
        let out = vars.forward(&mut tape, input)?;
        let raw = tape.value(out)?;
        Ok(raw
            .iter()
            .zip(self.out_mean.iter().zip(&self.out_std))
            .map(|(v, (m, sd))| v * sd + m)
            .collect())
    }

    /// Normalization statistics as named tensors (for checkpoints).
    pub fn stats_tensors(&self) -> Vec<(String, Tensor)> {
        let t = |v: &Vec<f64>| Tensor::from_vec(vec![v.len()], v.clone()).expect("finite stats");
        vec![
            ("stats.in_mean".to_string(), t(&self.in_mean)),
            ("stats.in_std".to_string(), t(&self.in_std)),
            ("stats.out_mean".to_string(), t(&self.out_mean)),
            ("stats.out_std".to_string(), t(&self.out_std)),
        ]
    }

    /// Restores statistics saved by [`IdmNet::stats_tensors`].
    pub fn set_stats(&mut self, mut stats: impl FnMut(&str) -> Result<Tensor>) -> Result<()> {
        let expect = |t: Tensor, n: usize, name: &str| -> Result<Vec<f64>> {
            if t.len() != n {
                return Err(CoreError::shape(format!(
                    "idm stat {name} has {} entries, expected {n}",
                    t.len()
                )));
            }
            Ok(t.data().to_vec())
        };
        self.in_mean = expect(stats("stats.in_mean")?, self.in_dim(), "in_mean")?;
        self.in_std = expect(stats("stats.in_std")?, self.in_dim(), "in_std")?;
        self.out_mean = expect(stats("stats.out_mean")?, self.d_a, "out_mean")?;
        self.out_std = expect(stats("stats.out_std")?, self.d_a, "out_std")?;
        Ok(())
    }
}

impl ParamVisit for IdmNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.net.visit(&crate::numerics::scoped(prefix, "net"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.net.visit_mut(&crate::numerics::scoped(prefix, "net"), f);
    }
}

/// Training knobs for the inverse model.
#[derive(Debug, Clone)]
pub struct IdmConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl IdmConfig {
    pub fn new(seed: u64) -> IdmConfig {
        IdmConfig { epochs: 40, lr: 1e-3, batch_size: 64, seed }
    }
}

/// Supervised transitions from a dataset, without latents.
pub fn idm_samples_plain(dataset: &Dataset) -> Vec<IdmSample> {
    samples_from(dataset, |_| None)
}

/// Supervised transitions carrying the successor step's true context.
pub fn idm_samples_true_context(dataset: &Dataset) -> Result<Vec<IdmSample>> {
    if !dataset.contexts_recorded() {
        return Err(CoreError::contract(
            "dataset records no ground-truth context to condition on",
        ));
    }
    Ok(samples_from(dataset, |rec_next| {
        rec_next.c_true.clone()
    }))
}

/// Supervised transitions whose latent is the recognition model's best guess
/// (the posterior mean) at the successor step — the same quantity the planner
/// holds at act time, so training and deployment see matching inputs.
/// Transitions whose successor lacks a full recognition window are skipped.
pub fn idm_samples_posterior(dataset: &Dataset, nets: &Stage1Nets) -> Result<Vec<IdmSample>> {
    let layout = nets.layout();
    let h = nets.history_len;
    let fut = usize::from(nets.include_future);
    let mut out = Vec::new();
    for episode in &dataset.episodes {
        for i in 0..episode.len().saturating_sub(1) {
            let anchor = i + 1;
            if anchor < h || anchor + fut >= episode.len() {
                continue;
            }
            let frames: Vec<Vec<f64>> = episode[anchor - h..=anchor + fut]
                .iter()
                .map(|rec| layout.frame_of(rec))
                .collect();
            let belief = posterior_infer_frames(nets, &frames)?;
            out.push(IdmSample {
                s: episode[i].s.clone(),
                s_next: episode[anchor].s.clone(),
                latent: Some(belief.mean),
                a: episode[i].a.clone(),
            });
        }
    }
    if out.is_empty() {
        return Err(CoreError::contract(
            "no transition has enough surrounding steps for a recognition window",
        ));
    }
    Ok(out)
}

fn samples_from(
    dataset: &Dataset,
    mut latent_of: impl FnMut(&crate::envsim::StepRecord) -> Option<Vec<f64>>,
) -> Vec<IdmSample> {
    let mut out = Vec::new();
    for episode in &dataset.episodes {
        for pair in episode.windows(2) {
            out.push(IdmSample {
                s: pair[0].s.clone(),
                s_next: pair[1].s.clone(),
                latent: latent_of(&pair[1]),
                a: pair[0].a.clone(),
            });
        }
    }
    out
}

/// Fits an inverse model to `samples` by Adam on mean squared action error.
/// All samples must agree with `latent_dim` on whether a latent is present.
pub fn train_idm(
    samples: &[IdmSample],
    latent_dim: Option<usize>,
    cfg: &IdmConfig,
) -> Result<IdmNet> {
    let first = samples
        .first()
        .ok_or_else(|| CoreError::contract("no transitions to fit the inverse model on"))?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return Err(CoreError::config("idm training needs epochs, batch size, and lr > 0"));
    }
    let d_s = first.s.len();
    let d_a = first.a.len();
    let master = Rng::seed(cfg.seed);
    let mut net = IdmNet::init(&mut master.derive(0), d_s, d_a, latent_dim);

    let inputs: Vec<Vec<f64>> = samples
        .iter()
        .map(|smp| net.assemble(&smp.s, &smp.s_next, smp.latent.as_deref()))
        .collect::<Result<_>>()?;
    for smp in samples {
        if smp.a.len() != d_a {
            return Err(CoreError::shape("inconsistent action dims across samples"));
        }
    }
    fit_stats(&inputs, &mut net.in_mean, &mut net.in_std);
    let outputs: Vec<Vec<f64>> = samples.iter().map(|smp| smp.a.clone()).collect();
    fit_stats(&outputs, &mut net.out_mean, &mut net.out_std);

    let z_in: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| {
            x.iter()
                .zip(net.in_mean.iter().zip(&net.in_std))
                .map(|(v, (m, sd))| (v - m) / sd)
                .collect()
        })
        .collect();
    let z_out: Vec<Vec<f64>> = outputs
        .iter()
        .map(|a| {
            a.iter()
                .zip(net.out_mean.iter().zip(&net.out_std))
                .map(|(v, (m, sd))| (v - m) / sd)
                .collect()
        })
        .collect();

    let mut adam = AdamState::new(cfg.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = master.derive(1 + epoch as u64);
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = GradAccum::new();
            for &i in chunk {
                let mut tape = Tape::new();
                let mut ix = BindIndex::new();
                let vars = net.net.bind(&mut tape, &mut ix, "net", false)?;
                let x = tape.constant_vec(z_in[i].clone())?;
                let pred = vars.forward(&mut tape, x)?;
                let target = tape.constant_vec(z_out[i].clone())?;
                let diff = tape.sub(pred, target)?;
                let sq = tape.square(diff)?;
                let loss = tape.sum(sq)?;
                let val = tape.value_scalar(loss)?;
                if !val.is_finite() {
                    return Err(CoreError::numeric(format!(
                        "epoch {epoch}: inverse-model loss is not finite"
                    )));
                }
                let grads = tape.backward(loss)?;
                acc.add(&ix.gather(&grads));
            }
            adam.step(&mut net, "", &acc.mean())?;
        }
    }
    Ok(net)
}

fn fit_stats(rows: &[Vec<f64>], mean: &mut [f64], std: &mut [f64]) {
    let n = rows.len() as f64;
    for m in mean.iter_mut() {
        *m = 0.0;
    }
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    for (d, sd) in std.iter_mut().enumerate() {
        let var: f64 = rows.iter().map(|r| (r[d] - mean[d]).powi(2)).sum::<f64>() / n;
        let s = var.sqrt();
        *sd = if s < STD_FLOOR { 1.0 } else { s };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{generate_dataset_seeded, ContextProcess, EnvSpec};

    #[test]
    fn constant_actions_are_learned_exactly() {
        let spec = EnvSpec::lineargauss_additive(
            0.5,
            1.0,
            1.0,
            0.1,
            ContextProcess::stepwise(0.5, 0.3, 0.4),
            20,
        );
        let mut data = generate_dataset_seeded(&spec, 3, 5).unwrap();
        for ep in &mut data.episodes {
            for rec in ep.iter_mut() {
                rec.a = vec![1.7];
            }
        }
        let samples = idm_samples_plain(&data);
        let mut cfg = IdmConfig::new(1);
        cfg.epochs = 60;
        let net = train_idm(&samples, None, &cfg).unwrap();
        // Constant outputs hit the z-score floor, so the net only has to land
        // on its output bias.
        let pred = net.infer(&samples[0].s, &samples[0].s_next, None).unwrap();
        assert!((pred[0] - 1.7).abs() < 0.05, "predicted {}", pred[0]);
    }

    #[test]
    fn latent_presence_must_match_the_model() {
        let mut rng = Rng::seed(0);
        let with = IdmNet::init(&mut rng, 2, 1, Some(2));
        let without = IdmNet::init(&mut rng, 2, 1, None);
        let s = [0.0, 0.0];
        assert!(matches!(with.infer(&s, &s, None), Err(CoreError::Contract(_))));
        assert!(matches!(without.infer(&s, &s, Some(&[0.0, 0.0])), Err(CoreError::Contract(_))));
        assert!(matches!(with.infer(&s, &s, Some(&[0.0])), Err(CoreError::Shape(_))));
        assert!(with.infer(&s, &s, Some(&[0.0, 0.0])).is_ok());
    }

    #[test]
    fn empty_sample_sets_are_rejected() {
        assert!(matches!(
            train_idm(&[], None, &IdmConfig::new(0)),
            Err(CoreError::Contract(_))
        ));
    }

    /// On the wind point mass (state `[p, v]`) the transition inverts in
    /// closed form: a = (v' - v)/dt + c' + rho v, with c' the wind over the
    /// transition. Conditioned on the true wind the fit should land there.
    #[test]
    fn wind_conditioned_inverse_matches_the_closed_form() {
        let mut spec = EnvSpec::pointmass_wind(ContextProcess::stepwise(5.0, 5.0, 0.5), 100);
        spec.sigma_s = 0.0;
        let data = generate_dataset_seeded(&spec, 8, 9).unwrap();
        let samples = idm_samples_true_context(&data).unwrap();
        let mut cfg = IdmConfig::new(2);
        cfg.epochs = 80;
        let net = train_idm(&samples, Some(1), &cfg).unwrap();

        let mut sq = 0.0;
        let mut n = 0.0;
        for smp in &samples {
            let pred = net.infer(&smp.s, &smp.s_next, smp.latent.as_deref()).unwrap();
            let c = smp.latent.as_ref().unwrap()[0];
            let analytic =
                (smp.s_next[1] - smp.s[1]) / spec.dt + c + spec.drag * smp.s[1];
            assert!((analytic - smp.a[0]).abs() < 1e-9, "oracle drifted from the data");
            sq += (pred[0] - smp.a[0]).powi(2);
            n += 1.0;
        }
        assert!(sq / n < 1e-2, "inverse-model mse {}", sq / n);
    }

    #[test]
    fn wind_blind_inverse_is_strictly_worse() {
        let mut spec = EnvSpec::pointmass_wind(ContextProcess::stepwise(5.0, 5.0, 0.5), 100);
        spec.sigma_s = 0.0;
        let data = generate_dataset_seeded(&spec, 8, 9).unwrap();
        let with_samples = idm_samples_true_context(&data).unwrap();
        let plain_samples = idm_samples_plain(&data);
        let mut cfg = IdmConfig::new(3);
        cfg.epochs = 80;
        let with = train_idm(&with_samples, Some(1), &cfg).unwrap();
        let without = train_idm(&plain_samples, None, &cfg).unwrap();

        let mse = |preds: Vec<f64>| preds.iter().sum::<f64>() / preds.len() as f64;
        let with_mse = mse(with_samples
            .iter()
            .map(|smp| {
                let p = with.infer(&smp.s, &smp.s_next, smp.latent.as_deref()).unwrap();
                (p[0] - smp.a[0]).powi(2)
            })
            .collect());
        let without_mse = mse(plain_samples
            .iter()
            .map(|smp| {
                let p = without.infer(&smp.s, &smp.s_next, None).unwrap();
                (p[0] - smp.a[0]).powi(2)
            })
            .collect());
        assert!(
            without_mse > with_mse,
            "blind mse {without_mse} should exceed conditioned mse {with_mse}"
        );
    }

    #[test]
    fn posterior_samples_sit_on_the_successor_window() {
        use crate::latentid::{FrameLayout, Modality, PriorInput, Stage1Nets};

        let spec = EnvSpec::lineargauss_additive(
            0.5,
            1.0,
            1.0,
            0.1,
            ContextProcess::stepwise(0.5, 0.3, 0.4),
            20,
        );
        let data = generate_dataset_seeded(&spec, 2, 6).unwrap();
        let layout = FrameLayout::new(1, 1, Modality::StatesActionsRewards);
        let nets = Stage1Nets::init(&mut Rng::seed(3), layout, 2, 2, true, PriorInput::Sample);
        let samples = idm_samples_posterior(&data, &nets).unwrap();
        // Anchors need two steps of history and one future step: 2..=18 in a
        // 20-step episode, 17 transitions each.
        assert_eq!(samples.len(), 2 * 17);
        let first = &samples[0];
        let ep = &data.episodes[0];
        assert_eq!(first.s, ep[1].s);
        assert_eq!(first.s_next, ep[2].s);
        assert_eq!(first.a, ep[1].a);
        let frames: Vec<Vec<f64>> = ep[0..=3].iter().map(|r| layout.frame_of(r)).collect();
        let belief = crate::latentid::posterior_infer_frames(&nets, &frames).unwrap();
        assert_eq!(first.latent.as_deref().unwrap(), belief.mean.as_slice());
    }

    #[test]
    fn stats_round_trip_through_tensors() {
        let mut rng = Rng::seed(4);
        let mut net = IdmNet::init(&mut rng, 2, 1, Some(2));
        net.in_mean = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        net.in_std = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        net.out_mean = vec![-0.5];
        net.out_std = vec![2.5];
        let stats = net.stats_tensors();
        let mut other = IdmNet::init(&mut Rng::seed(5), 2, 1, Some(2));
        other
            .set_stats(|name| {
                stats
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| CoreError::format(format!("missing {name}")))
            })
            .unwrap();
        assert_eq!(other.in_mean, net.in_mean);
        assert_eq!(other.out_std, net.out_std);
    }
}
