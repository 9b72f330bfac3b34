//! End-to-end acceptance checks. Each criterion prints one `PASS`/`FAIL`
//! line; run with `cargo test --release -p brain-diffae --test acceptance -- --nocapture`.

use std::time::{Duration, Instant};

use brain_diffae::data::synth::Phantom;
use brain_diffae::data::{synth_generate, Cohort, ImageSet, SynthConfig};
use brain_diffae::diffusion::{predict_x0_unclamped, ReverseStepConfig};
use brain_diffae::evaluation::{
    build_report, interpolate_pair, interpolation_weights, inversions, ks_two_sample, mae, pearson_r, predict_set,
    r_squared, reconstruct_set, KsMethod,
};
use brain_diffae::networks::{ModelBundle, ModelConfig};
use brain_diffae::rng;
use brain_diffae::schedule::{make_linear_schedule, ScheduleSpec};
use brain_diffae::training::{compute_loss, training_step, Adam, AdamConfig, Precision, TrainConfig, Trainer};
use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = std::result::Result<String, String>;

/// Print the criterion's verdict and fail the test on `Err`.
/// Writes to the raw stderr handle so verdicts show up without `--nocapture`.
fn verdict(id: &str, name: &str, outcome: &Outcome) {
    use std::io::Write;
    let line = match outcome {
        Ok(detail) => format!("PASS  criterion {id}: {name} ({detail})"),
        Err(detail) => format!("FAIL  criterion {id}: {name} ({detail})"),
    };
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn report(id: &str, name: &str, outcome: Outcome) {
    verdict(id, name, &outcome);
    if let Err(detail) = outcome {
        panic!("criterion {id} failed: {detail}");
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Outcome {
    check(
        elapsed.as_secs_f64() < limit_s,
        format!("{:.2}s of {limit_s}s budget", elapsed.as_secs_f64()),
    )
}

fn vec1(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn criterion_1_forward_marginals() {
    let start = Instant::now();
    let outcome = (|| -> Outcome {
        let sched = make_linear_schedule(50, 1e-4, 0.02).map_err(|e| e.to_string())?;
        let n = 10_000;
        let x0 = 0.7;
        let mut rng = rng::stream(101, 0);
        let mut x = Tensor::full(x0, n, &Device::Cpu).unwrap();
        let mut details = Vec::new();
        for t in 0..50 {
            let noise = rng::normal_tensor(&mut rng, n, DType::F64, &Device::Cpu).unwrap();
            x = sched.forward_step(&x, t, &noise).unwrap();
            if [5, 25, 49].contains(&t) {
                let v = vec1(&x);
                let m = v.iter().sum::<f64>() / n as f64;
                let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
                let ab = sched.alpha_bar(t).unwrap();
                let (want_m, want_sd) = (ab.sqrt() * x0, (1.0 - ab).sqrt());
                let se_m = want_sd / (n as f64).sqrt();
                let se_sd = want_sd / (2.0 * (n - 1) as f64).sqrt();
                let zm = (m - want_m) / se_m;
                let zs = (sd - want_sd) / se_sd;
                if zm.abs() > 3.0 || zs.abs() > 3.0 {
                    return Err(format!("t={t}: mean z {zm:.2}, std z {zs:.2}"));
                }
                details.push(format!("t={t} z=({zm:.2},{zs:.2})"));
            }
        }
        within(start.elapsed(), 10.0).map(|d| format!("{}; {d}", details.join(" ")))
    })();
    report("1", "forward-marginal consistency", outcome);
}

#[test]
fn criterion_2_oracle_inversion() {
    let start = Instant::now();
    let outcome = (|| -> Outcome {
        let sched = ScheduleSpec::default().build().unwrap();
        let mut rng = rng::stream(202, 0);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let t = rng.random_range(0..sched.num_steps());
            let x0: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
            let x0 = Tensor::from_vec(x0, (1, 1, 8, 8), &Device::Cpu).unwrap();
            let eps = rng::normal_tensor(&mut rng, (1, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
            let x_t = sched.q_sample(&x0, t, &eps).unwrap();
            let back = predict_x0_unclamped(&x_t, &eps, t, &sched).unwrap();
            let (a, b) = (vec1(&x0), vec1(&back));
            let num: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let den: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
            worst = worst.max(num / den);
        }
        check(worst <= 1e-6, format!("max relative error {worst:.2e}"))?;
        within(start.elapsed(), 5.0).map(|d| format!("max relative error {worst:.2e}; {d}"))
    })();
    report("2", "oracle inversion", outcome);
}

fn tiny_f64_model(seed: u64) -> ModelBundle {
    ModelBundle::new(ModelConfig::tiny(), ScheduleSpec::default().build().unwrap(), seed, DType::F64, &Device::Cpu)
        .unwrap()
}

fn tiny_batch(n: usize, seed: u64) -> (Tensor, Vec<f64>) {
    let cfg = SynthConfig {
        n,
        seed,
        image_size: 8,
        unlabeled_fraction: 0.0,
        ..SynthConfig::default()
    };
    let ph = synth_generate(&cfg).unwrap();
    let px: Vec<f64> = ph.iter().flat_map(|p| p.image.pixels.iter().map(|&v| v as f64)).collect();
    (
        Tensor::from_vec(px, (n, 1, 8, 8), &Device::Cpu).unwrap(),
        ph.iter().map(|p| p.age).collect(),
    )
}

fn get_entry(var: &Var, i: usize) -> f64 {
    vec1(var.as_tensor())[i]
}

fn set_entry(var: &Var, i: usize, value: f64) {
    let mut v = vec1(var.as_tensor());
    v[i] = value;
    let t = Tensor::from_vec(v, var.as_tensor().shape(), &Device::Cpu).unwrap();
    var.set(&t).unwrap();
}

#[test]
fn criterion_3_gradient_check() {
    let start = Instant::now();
    let outcome = (|| -> Outcome {
        let model = tiny_f64_model(31);
        let (x0, ages) = tiny_batch(4, 32);
        let labels: Vec<Option<f64>> = ages.iter().enumerate().map(|(i, &a)| (i != 2).then_some(a)).collect();
        let mut norm_ages = ages.clone();
        norm_ages.remove(2);
        let mut model = model;
        model.set_age_normalization(brain_diffae::networks::AgeNormalization::fit(&norm_ages));
        let cfg = TrainConfig {
            precision: Precision::F64,
            seed: 33,
            ..TrainConfig::default()
        };
        let loss = |m: &ModelBundle| compute_loss(m, &x0, &labels, &cfg, 7).unwrap().loss.total;
        let terms = compute_loss(&model, &x0, &labels, &cfg, 7).unwrap();
        let grads = terms.total.backward().unwrap();

        // 20 scalar parameters, drawn from all three networks. Attention key
        // biases add the same amount to every logit of a query, so softmax
        // gives them an identically zero gradient and a finite difference only
        // sees roundoff; they are checked for zero separately.
        let params = model.store().params();
        for (name, var) in params.iter().filter(|(n, _)| n.ends_with(".key.bias")) {
            let g = grads.get(var.as_tensor()).map(vec1).unwrap_or_default();
            let largest = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            check(largest < 1e-12, format!("{name} has gradient {largest:.2e}, expected 0"))?;
        }
        let mut rng = rng::stream(34, 0);
        let mut picks = Vec::new();
        for (prefix, k) in [("eps.", 8), ("enc.", 6), ("age.", 6)] {
            let names: Vec<&String> = params
                .keys()
                .filter(|n| n.starts_with(prefix) && !n.ends_with(".key.bias"))
                .collect();
            for _ in 0..k {
                let name = names[rng.random_range(0..names.len())];
                let len = params[name].as_tensor().elem_count();
                picks.push((name.clone(), rng.random_range(0..len)));
            }
        }
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut worst_at = String::new();
        for (name, i) in &picks {
            let var = &params[name];
            let g = grads.get(var.as_tensor()).map(|g| vec1(g)[*i]).unwrap_or(0.0);
            let orig = get_entry(var, *i);
            set_entry(var, *i, orig + h);
            let up = loss(&model);
            set_entry(var, *i, orig - h);
            let down = loss(&model);
            set_entry(var, *i, orig);
            let fd = (up - down) / (2.0 * h);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{i}] g={g:.6e} fd={fd:.6e}");
            }
        }
        check(worst < 1e-3, format!("max relative error {worst:.2e} at {worst_at}"))?;
        within(start.elapsed(), 120.0).map(|d| format!("20 parameters, max relative error {worst:.2e}; {d}"))
    })();
    report("3", "gradient correctness", outcome);
}

fn age_params(m: &ModelBundle) -> Vec<(String, Vec<f64>)> {
    m.store()
        .params()
        .iter()
        .filter(|(k, _)| k.starts_with("age."))
        .map(|(k, v)| (k.clone(), vec1(v.as_tensor())))
        .collect()
}

#[test]
fn criterion_4_semi_supervision_contract() {
    let outcome = (|| -> Outcome {
        let (x0, ages) = tiny_batch(4, 41);
        let x0 = x0.to_dtype(DType::F32).unwrap();
        let cfg = TrainConfig {
            seed: 42,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let labeled: Vec<Option<f64>> = ages.iter().map(|&a| Some(a)).collect();
        let unlabeled = vec![None; ages.len()];
        let mut out = Vec::new();
        for labels in [&labeled, &unlabeled] {
            let mut m = ModelBundle::new(ModelConfig::tiny(), ScheduleSpec::default().build().unwrap(), 43, DType::F32, &Device::Cpu)
                .unwrap();
            m.set_age_normalization(brain_diffae::networks::AgeNormalization::fit(&ages));
            let before = age_params(&m);
            let mut opt = Adam::new(AdamConfig::default(), cfg.learning_rate).unwrap();
            let loss = training_step(&m, &mut opt, &x0, labels, &cfg, 0).unwrap();
            out.push((loss.diffusion_term, before != age_params(&m)));
        }
        let same_bits = out[0].0.to_bits() == out[1].0.to_bits();
        check(
            same_bits,
            format!("diffusion term {} (labeled) vs {} (unlabeled)", out[0].0, out[1].0),
        )?;
        check(out[0].1 && !out[1].1, format!("age head changed: labeled {}, unlabeled {}", out[0].1, out[1].1))?;

        // Over a mixed run, the age head moves exactly on steps whose batch has labels.
        let cfg = SynthConfig {
            n: 40,
            seed: 44,
            image_size: 8,
            unlabeled_fraction: 0.5,
            ..SynthConfig::default()
        };
        let set = image_set(&synth_generate(&cfg).unwrap(), 8);
        let tc = TrainConfig {
            batch_size: 5,
            learning_rate: 1e-3,
            max_steps: Some(16),
            seed: 45,
            ..TrainConfig::default()
        };
        let model = ModelBundle::new(ModelConfig::tiny(), ScheduleSpec::default().build().unwrap(), 46, DType::F32, &Device::Cpu)
            .unwrap();
        let mut t = Trainer::new(model, set, tc).unwrap();
        let (mut lab, mut unlab) = (0, 0);
        for _ in 0..16 {
            let before = age_params(t.model());
            let loss = t.train_step().unwrap();
            let moved = before != age_params(t.model());
            if moved != (loss.labeled > 0) {
                return Err(format!("step {}: labeled {} but age head moved = {moved}", t.step(), loss.labeled));
            }
            if loss.labeled > 0 {
                lab += 1
            } else {
                unlab += 1
            }
        }
        check(
            lab > 0 && unlab > 0,
            format!("bitwise-equal diffusion term; {lab} labeled / {unlab} unlabeled steps consistent"),
        )
    })();
    report("4", "semi-supervision contract", outcome);
}

mod oracle {
    /// Definitional sample correlation via standardised scores.
    pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sx = (x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let sy = (y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        x.iter().zip(y).map(|(a, b)| ((a - mx) / sx) * ((b - my) / sy)).sum::<f64>() / (n - 1.0)
    }

    /// Two-sided p of the t-statistic via the regularised incomplete beta.
    pub fn pearson_p(r: f64, n: usize) -> f64 {
        let df = (n - 2) as f64;
        let t2 = r * r * df / (1.0 - r * r);
        statrs::function::beta::beta_reg(df / 2.0, 0.5, df / (df + t2))
    }

    pub fn mae(p: &[f64], t: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            s += if p[i] > t[i] { p[i] - t[i] } else { t[i] - p[i] };
        }
        s / p.len() as f64
    }

    pub fn r_squared(p: &[f64], t: &[f64]) -> f64 {
        let m = t.iter().sum::<f64>() / t.len() as f64;
        let ss_res: f64 = p.iter().zip(t).map(|(a, b)| (b - a) * (b - a)).sum();
        let ss_tot: f64 = t.iter().map(|b| (b - m) * (b - m)).sum();
        1.0 - ss_res / ss_tot
    }

    fn ecdf(s: &[f64], x: f64) -> f64 {
        s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64
    }

    /// Largest ECDF gap, evaluated at every pooled observation.
    pub fn ks_d(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .chain(b)
            .map(|&x| (ecdf(a, x) - ecdf(b, x)).abs())
            .fold(0.0, f64::max)
    }

    /// Share of all relabelings of the pooled ranks whose statistic reaches `d`.
    pub fn ks_p_enumerate(na: usize, nb: usize, d: f64) -> f64 {
        let n = na + nb;
        let (mut hits, mut total) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != na {
                continue;
            }
            total += 1;
            let (mut i, mut j, mut worst) = (0usize, 0usize, 0.0f64);
            for k in 0..n {
                if mask & (1 << k) != 0 {
                    i += 1
                } else {
                    j += 1
                }
                worst = worst.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
            }
            if worst >= d - 1e-12 {
                hits += 1;
            }
        }
        hits as f64 / total as f64
    }

    /// Exact p by counting monotone lattice paths that stay strictly inside
    /// the band, memoised top-down in exact integers.
    pub fn ks_p_paths(na: usize, nb: usize, d: f64) -> f64 {
        fn count(i: usize, j: usize, na: usize, nb: usize, d: f64, memo: &mut Vec<Vec<Option<u128>>>) -> u128 {
            if (i as f64 / na as f64 - j as f64 / nb as f64).abs() >= d - 1e-12 {
                return 0;
            }
            if i == na && j == nb {
                return 1;
            }
            if let Some(c) = memo[i][j] {
                return c;
            }
            let mut c = 0;
            if i < na {
                c += count(i + 1, j, na, nb, d, memo);
            }
            if j < nb {
                c += count(i, j + 1, na, nb, d, memo);
            }
            memo[i][j] = Some(c);
            c
        }
        let mut memo = vec![vec![None; nb + 1]; na + 1];
        let inside = count(0, 0, na, nb, d, &mut memo);
        let mut total: u128 = 1;
        for k in 0..na {
            total = total * (nb + na - k) as u128 / (k + 1) as u128;
        }
        1.0 - inside as f64 / total as f64
    }

    /// Kolmogorov tail with the small-sample correction, summed to convergence.
    pub fn ks_p_asymptotic(na: usize, nb: usize, d: f64) -> f64 {
        let ne = (na * nb) as f64 / (na + nb) as f64;
        let lam = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
        if lam < 0.2 {
            return 1.0;
        }
        let mut s = 0.0;
        for k in 1..=200 {
            let k = k as f64;
            s += 2.0 * if k as i64 % 2 == 1 { 1.0 } else { -1.0 } * (-2.0 * k * k * lam * lam).exp();
        }
        s.clamp(0.0, 1.0)
    }
}

#[test]
fn criterion_5_metric_oracles() {
    let start = Instant::now();
    let outcome = (|| -> Outcome {
        let mut rng = rng::stream(501, 0);
        let mut worst: f64 = 0.0;
        let mut note = String::new();
        let mut track = |what: &str, got: f64, want: f64| {
            let err = (got - want).abs();
            if err > worst {
                worst = err;
                note = format!("{what}: {got} vs {want}");
            }
        };
        for f in 0..1000 {
            let n = rng.random_range(3..60);
            let truth: Vec<f64> = (0..n).map(|_| rng.random_range(20.0..90.0)).collect();
            let slope = rng.random_range(-1.0..1.5);
            let pred: Vec<f64> = truth
                .iter()
                .map(|t| slope * t + rng.random_range(-20.0..20.0) + 10.0)
                .collect();
            let c = pearson_r(&pred, &truth).map_err(|e| e.to_string())?;
            track("pearson r", c.r, oracle::pearson(&pred, &truth));
            track("pearson p", c.p, oracle::pearson_p(oracle::pearson(&pred, &truth), n));
            track("mae", mae(&pred, &truth).unwrap(), oracle::mae(&pred, &truth));
            track("r2", r_squared(&pred, &truth).unwrap(), oracle::r_squared(&pred, &truth));

            let (na, nb) = if f % 2 == 0 {
                (rng.random_range(1..26), rng.random_range(1..26))
            } else {
                (rng.random_range(1..80), rng.random_range(26..80))
            };
            let shift = rng.random_range(0.0..1.5);
            let a: Vec<f64> = (0..na).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..nb).map(|_| rng.random_range(0.0..1.0) + shift).collect();
            let ks = ks_two_sample(&a, &b).unwrap();
            let d = oracle::ks_d(&a, &b);
            track("ks statistic", ks.statistic, d);
            let want_p = match ks.method {
                KsMethod::Exact => oracle::ks_p_paths(na, nb, d),
                KsMethod::Asymptotic => oracle::ks_p_asymptotic(na, nb, d),
            };
            track("ks p", ks.p_value, want_p);
        }
        // Exhaustive agreement of the exact p for every size pair up to 8.
        for na in 1..=8 {
            for nb in 1..=8 {
                let mut samples: Vec<f64> = (0..na + nb).map(|k| k as f64).collect();
                for _ in 0..3 {
                    samples.shuffle(&mut rng);
                    let (a, b) = samples.split_at(na);
                    let ks = ks_two_sample(a, b).unwrap();
                    track("ks exact enumeration", ks.p_value, oracle::ks_p_enumerate(na, nb, ks.statistic));
                }
            }
        }
        check(worst <= 1e-10, format!("max abs deviation {worst:.2e} ({note})"))?;
        within(start.elapsed(), 30.0).map(|d| format!("1000 fixtures, max abs deviation {worst:.2e}; {d}"))
    })();
    report("5", "metric oracle equivalence", outcome);
}

fn image_set(phantoms: &[Phantom], size: usize) -> ImageSet {
    let images: Vec<_> = phantoms.iter().map(|p| p.image.clone()).collect();
    ImageSet::from_images(
        phantoms.iter().map(|p| p.id.clone()).collect(),
        phantoms.iter().map(|p| p.labeled.then_some(p.age)).collect(),
        &images,
        size,
    )
    .unwrap()
}

/// Steps, batch size and learning rate of the synthetic end-to-end run.
const E2E_STEPS: usize = 1500;
const E2E_BATCH: usize = 16;
const E2E_LR: f64 = 3e-4;

#[test]
fn criteria_6_7_8_synthetic_end_to_end() {
    let start = Instant::now();
    let cfg = SynthConfig {
        n: 2000,
        n_test: 400,
        seed: 2024,
        age_range: [20.0, 90.0],
        image_size: 32,
        unlabeled_fraction: 0.2,
    };
    let phantoms = synth_generate(&cfg).unwrap();
    let (train, test): (Vec<_>, Vec<_>) = phantoms.into_iter().partition(|p| p.cohort == Cohort::Train);
    assert_eq!((train.len(), test.len()), (2000, 400));
    assert_eq!(train.iter().filter(|p| !p.labeled).count(), 400);
    let train_set = image_set(&train, 32);
    let test_set = image_set(&test, 32);
    let truth: Vec<f64> = test.iter().map(|p| p.age).collect();

    let model = ModelBundle::new(ModelConfig::reduced(), ScheduleSpec::default().build().unwrap(), 0, DType::F32, &Device::Cpu)
        .unwrap();
    let tc = TrainConfig {
        batch_size: E2E_BATCH,
        learning_rate: E2E_LR,
        max_steps: Some(E2E_STEPS),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, train_set, tc).unwrap();
    trainer.run(None).unwrap();
    let model = trainer.into_model().unwrap();
    let train_time = start.elapsed().as_secs_f64();

    let pred = predict_set(&model, &test_set).unwrap();
    let r = pearson_r(&pred, &truth).unwrap().r;
    let err = mae(&pred, &truth).unwrap();
    let c6 = check(
        r >= 0.8 && err <= 8.0 && train_time <= 4.0 * 3600.0,
        format!("r = {r:.4}, MAE = {err:.3} after {E2E_STEPS} steps, {train_time:.0}s training"),
    );

    let ddim = ReverseStepConfig::evenly_spaced(model.schedule().num_steps(), 50, 0.0).unwrap();
    let idx: Vec<usize> = (0..50).collect();
    let recon = reconstruct_set(&model, &test_set, &idx, &ddim, 0).unwrap();
    let c7 = check(
        recon.mean_error() <= 0.08,
        format!("mean absolute pixel error {:.4} over 50 held-out phantoms", recon.mean_error()),
    );

    let young = (0..truth.len()).min_by(|&i, &j| truth[i].total_cmp(&truth[j])).unwrap();
    let old = (0..truth.len()).max_by(|&i, &j| truth[i].total_cmp(&truth[j])).unwrap();
    let interp = interpolate_pair(&model, &test_set, young, old, &interpolation_weights(5).unwrap(), &ddim, 0).unwrap();
    let (count, drop) = inversions(&interp.ages);
    let ages: Vec<String> = interp.ages.iter().map(|a| format!("{a:.2}")).collect();
    let c8 = check(
        count == 0 || (count == 1 && drop <= 1.0),
        format!(
            "ages {} between phantoms aged {:.1} and {:.1}; {count} inversions",
            ages.join(" -> "),
            truth[young],
            truth[old]
        ),
    );

    let failed: Vec<&str> = [("6", &c6), ("7", &c7), ("8", &c8)]
        .iter()
        .filter(|(_, c)| c.is_err())
        .map(|(id, _)| *id)
        .collect();
    for (id, name, c) in [
        ("6", "synthetic end-to-end accuracy", c6),
        ("7", "reconstruction quality", c7),
        ("8", "interpolation monotonicity", c8),
    ] {
        verdict(id, name, &c);
    }
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}

#[test]
fn criterion_9_reporting_fidelity() {
    let outcome = (|| -> Outcome {
        let dir = tempfile::tempdir().unwrap();
        let mut outputs = Vec::new();
        for run in 0..2 {
            let cfg = SynthConfig {
                n: 24,
                n_test: 30,
                seed: 9,
                image_size: 8,
                ..SynthConfig::default()
            };
            let ph = synth_generate(&cfg).unwrap();
            let (train, test): (Vec<_>, Vec<_>) = ph.into_iter().partition(|p| p.cohort == Cohort::Train);
            let model = ModelBundle::new(ModelConfig::tiny(), ScheduleSpec::default().build().unwrap(), 9, DType::F32, &Device::Cpu)
                .unwrap();
            let tc = TrainConfig {
                batch_size: 6,
                max_steps: Some(8),
                seed: 9,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            };
            let mut trainer = Trainer::new(model, image_set(&train, 8), tc).unwrap();
            trainer.run(None).unwrap();
            let model = trainer.into_model().unwrap();
            let test_set = image_set(&test, 8);
            let pred = predict_set(&model, &test_set).unwrap();
            let rows: Vec<(String, f64, f64)> = test
                .iter()
                .zip(&pred)
                .map(|(p, &y)| (p.id.clone(), p.age, y))
                .collect();
            let mut report = build_report("test", &rows, &vec![None; rows.len()], true).unwrap();
            let external: Vec<(String, f64)> = test.iter().map(|p| (p.id.clone(), p.age + 4.0)).collect();
            report.compare_with("External", &external).unwrap();
            let out = dir.path().join(format!("run{run}"));
            report.write(&out).unwrap();
            let files: Vec<Vec<u8>> = ["summary.txt", "summary.json", "records.csv", "scatter.svg", "pad_boxplot.svg"]
                .iter()
                .map(|f| std::fs::read(out.join(f)).unwrap())
                .collect();
            outputs.push(files);
        }
        check(outputs[0] == outputs[1], "outputs differ between runs".into())?;
        let summary = String::from_utf8(outputs[0][0].clone()).unwrap();
        for row in ["Test R", "(p = ", "Test MAE", "Test R²", "Brain-PAD", "Mean", "Std", "KS Statistic"] {
            if !summary.contains(row) {
                return Err(format!("summary lacks `{row}`:\n{summary}"));
            }
        }
        Ok("two seeded runs byte-identical; summary has r/p, MAE, R², PAD mean/std and KS rows".into())
    })();
    report("9", "reporting fidelity", outcome);
}
