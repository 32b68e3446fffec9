//! Temporary timing and stability probes (not part of the suite).

use std::time::Instant;

use petsr_core::config::{preset_scanner, PpcrConfig, ScannerConfig, ScannerPreset};
use petsr_core::forward::{calibrate_to, degrade, PsfMode};
use petsr_core::grid::Units;
use petsr_core::likelihood::{poisson_nll_grad, DEFAULT_EPSILON};
use petsr_core::phantom::{generate, PhantomSpec};
use petsr_core::sampler::dc_refine;

#[test]
#[ignore]
fn probe_full_scale_descent_and_timing() {
    let spec = PhantomSpec { seed: 1, ..PhantomSpec::default() };
    let p = generate(&spec).unwrap();
    let base = preset_scanner(ScannerPreset::Standard, &ScannerConfig::default());
    let cfg = calibrate_to(&base, &p.activity).unwrap();
    println!("count_scale_norm = {}", cfg.count_scale_norm);

    let t0 = Instant::now();
    let acq = degrade(&p.activity, &cfg, 1).unwrap();
    println!("degrade (forward+poisson+mlem20): {:?}", t0.elapsed());
    println!("mean counts = {}", acq.sampled.mean());

    // Timing: one gradient evaluation at 128^2.
    let z0 = p.activity.map(Units::Activity, |v| 0.8 * v + 0.05).unwrap();
    let t0 = Instant::now();
    let eval = poisson_nll_grad(&z0, &acq.sampled, &cfg, PsfMode::Full, DEFAULT_EPSILON).unwrap();
    println!("one nll+grad eval: {:?}", t0.elapsed());
    println!("nll at start {}", eval.nll);
    let gmax = eval.grad.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    println!("grad inf-norm {gmax}, activity max {}", z0.max());

    // Stability: 20 plain projected gradient steps at eta=0.05.
    let t0 = Instant::now();
    let out = dc_refine(&z0, &acq.sampled, &cfg, PsfMode::Full, 20, 0.05, 0.0, true, None).unwrap();
    println!("dc_refine m=20: {:?}", t0.elapsed());
    println!("nll {} -> {}", out.nll_initial, out.nll_final);
    assert!(out.nll_final <= out.nll_initial);

    // Nesterov flavour.
    let out = dc_refine(&z0, &acq.sampled, &cfg, PsfMode::Full, 20, 0.05, 0.9, true, None).unwrap();
    println!("nesterov nll {} -> {}", out.nll_initial, out.nll_final);

    // Identity-PSF flavour (early steps).
    let out =
        dc_refine(&z0, &acq.sampled, &cfg, PsfMode::Identity, 20, 0.05, 0.0, true, None).unwrap();
    println!("identity-psf nll {} -> {}", out.nll_initial, out.nll_final);

    // Step-by-step monotonicity at eta=0.05, mu=0.
    let mut z = z0.clone();
    let mut prev = out.nll_initial;
    let mut mono = true;
    for k in 0..30 {
        let o = dc_refine(&z, &acq.sampled, &cfg, PsfMode::Full, 1, 0.05, 0.0, true, None).unwrap();
        if o.nll_final > prev + 1e-9 {
            println!("non-monotone at iter {k}: {} -> {}", prev, o.nll_final);
            mono = false;
        }
        prev = o.nll_final;
        z = o.z;
    }
    println!("monotone over 30 single steps: {mono}");
}

#[test]
#[ignore]
fn probe_ood_descent() {
    let spec = PhantomSpec { seed: 2, ..PhantomSpec::default() };
    let p = generate(&spec).unwrap();
    let base = preset_scanner(ScannerPreset::Ood, &ScannerConfig::default());
    let cfg = calibrate_to(&base, &p.activity).unwrap();
    let acq = degrade(&p.activity, &cfg, 2).unwrap();
    let z0 = p.activity.map(Units::Activity, |v| 0.8 * v + 0.05).unwrap();
    let out = dc_refine(&z0, &acq.sampled, &cfg, PsfMode::Full, 20, 0.05, 0.0, true, None).unwrap();
    println!("ood nll {} -> {}", out.nll_initial, out.nll_final);
    assert!(out.nll_final <= out.nll_initial);
}

#[test]
#[ignore]
fn probe_training_quality() {
    use petsr_core::net::CondMode;
    use petsr_core::train::{train_tiny_denoiser, validation_mse, TrainConfig, TrainingCase};
    let t0 = Instant::now();
    let cases: Vec<TrainingCase> = (0..40)
        .map(|i| {
            let p = generate(&PhantomSpec { seed: 1000 + i, grid_size: 64, ..PhantomSpec::default() }).unwrap();
            TrainingCase { activity: p.activity, anatomy: p.anatomy }
        })
        .collect();
    let val: Vec<TrainingCase> = (0..5)
        .map(|i| {
            let p = generate(&PhantomSpec { seed: 2000 + i, grid_size: 64, ..PhantomSpec::default() }).unwrap();
            TrainingCase { activity: p.activity, anatomy: p.anatomy }
        })
        .collect();
    println!("data gen: {:?}", t0.elapsed());

    let cfg = TrainConfig { cond_mode: CondMode::CrossAttention, steps: 2000, log_every: 100, ..TrainConfig::default() };
    let t0 = Instant::now();
    let out = train_tiny_denoiser(&cases, &cfg).unwrap();
    println!("train 2000 steps @64: {:?} ({:?}/step)", t0.elapsed(), t0.elapsed() / 2000);
    for (s, l) in &out.loss_log {
        println!("  step {s}: loss {l:.5}");
    }
    let (model, baseline) = validation_mse(&out.weights, &val, 500, 42).unwrap();
    println!("val mse t=500: model {model:.5} baseline {baseline:.5} improvement {:.1}%", 100.0 * (1.0 - model / baseline));
}
