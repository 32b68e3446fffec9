//! Pipeline stages behind the CLI subcommands: dataset generation,
//! degradation, training, reconstruction, evaluation and the ablation
//! sweep. Every stage is deterministic given its config, writes per-case
//! files (safe to produce concurrently) and finishes single-writer files
//! (manifest, CSVs) after a sort by case id.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use petsr_core::config::{preset_scanner, ScannerConfig, ScannerPreset};
use petsr_core::diffusion::make_schedule;
use petsr_core::forward::{calibrate_to, degrade, full_geometry, PsfMode};
use petsr_core::grid::{GridImage, LesionMask, SinogramKind, Units};
use petsr_core::likelihood::{poisson_nll, DEFAULT_EPSILON};
use petsr_core::metrics;
use petsr_core::phantom::{generate, PhantomSpec};
use petsr_core::sampler::{ppcr_reconstruct, AblationVariant, StepTrace};
use petsr_core::train::{train_tiny_denoiser, TinyDenoiser, TrainError, TrainingCase};

use crate::error::{CliError, Result};
use crate::manifest::{read_manifest, write_manifest, ManifestEntry, Split};
use crate::pgm;
use crate::psrg;
use crate::runconfig::RunConfig;
use crate::weights_io;

pub fn setting_tag(preset: ScannerPreset) -> &'static str {
    match preset {
        ScannerPreset::Standard => "std",
        ScannerPreset::Ood => "ood",
    }
}

fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

fn cond_name(mode: petsr_core::net::CondMode) -> &'static str {
    match mode {
        petsr_core::net::CondMode::CrossAttention => "attention",
        petsr_core::net::CondMode::Concat => "concat",
    }
}

pub fn weights_path(out_dir: &Path, mode: petsr_core::net::CondMode) -> PathBuf {
    out_dir.join("weights").join(format!("denoiser_{}.psdw", cond_name(mode)))
}

/// Runs `job` over the items with at most `workers` threads. Items are
/// claimed from a shared counter; each job writes only its own files, so
/// scheduling order cannot affect the outputs.
fn run_parallel<T: Sync>(
    items: &[T],
    workers: usize,
    job: impl Fn(&T) -> Result<()> + Sync,
) -> Result<()> {
    let workers = workers.max(1).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<CliError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= items.len() {
                    break;
                }
                if failure.lock().unwrap().is_some() {
                    break;
                }
                if let Err(e) = job(&items[idx]) {
                    let mut slot = failure.lock().unwrap();
                    if slot.is_none() {
                        *slot = Some(e);
                    }
                    break;
                }
            });
        }
    });
    match failure.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------
// phantom
// ---------------------------------------------------------------------

/// Generates the seeded dataset and writes the manifest. Returns the
/// manifest path.
pub fn cmd_phantom(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.join("phantoms");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let (n_train, n_val, _) = cfg.split_counts();
    let base = cfg.phantom_base();

    let indices: Vec<usize> = (0..cfg.case_count).collect();
    let entries: Mutex<Vec<ManifestEntry>> = Mutex::new(Vec::with_capacity(cfg.case_count));
    run_parallel(&indices, cfg.workers, |&i| {
        let spec = PhantomSpec { seed: base.seed.wrapping_add(i as u64), ..base.clone() };
        let phantom = generate(&spec)?;
        let id = case_id(i);
        let act_rel = format!("phantoms/{id}_act.psrg");
        let anat_rel = format!("phantoms/{id}_anat.psrg");
        psrg::write_image(&cfg.out_dir.join(&act_rel), &phantom.activity)?;
        psrg::write_image(&cfg.out_dir.join(&anat_rel), &phantom.anatomy)?;
        let mut mask_rels = Vec::new();
        for (k, mask) in phantom.lesions.iter().enumerate() {
            let rel = format!("phantoms/{id}_mask_{k}.psrg");
            psrg::write_mask(&cfg.out_dir.join(&rel), mask, spec.spacing_mm)?;
            mask_rels.push(rel);
        }
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        entries.lock().unwrap().push(ManifestEntry {
            case_id: id,
            split,
            activity_path: act_rel,
            anatomy_path: anat_rel,
            mask_paths: mask_rels,
        });
        Ok(())
    })?;

    let mut entries = entries.into_inner().unwrap();
    entries.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let manifest = dir.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------
// degrade
// ---------------------------------------------------------------------

fn load_entries(cfg: &RunConfig) -> Result<Vec<ManifestEntry>> {
    read_manifest(&cfg.out_dir.join("phantoms").join("manifest.txt"))
}

/// Index of a case id in the generation order (for seed derivation).
fn case_index(id: &str) -> u64 {
    id.strip_prefix("case_").and_then(|s| s.parse::<u64>().ok()).unwrap_or(0)
}

fn acq_sidecar_path(out_dir: &Path, id: &str, tag: &str) -> PathBuf {
    out_dir.join("degraded").join(format!("{id}_{tag}_acq.txt"))
}

fn write_acq_sidecar(path: &Path, scanner: &ScannerConfig) -> Result<()> {
    let text = format!(
        "count_scale_norm = {}\nbackground_per_bin = {}\n",
        scanner.count_scale_norm, scanner.background_per_bin
    );
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_acq_sidecar(path: &Path, scanner: &mut ScannerConfig) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else { continue };
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::format(path, &format!("bad value in '{line}'")))?;
        match key.trim() {
            "count_scale_norm" => scanner.count_scale_norm = value,
            "background_per_bin" => scanner.background_per_bin = value,
            other => return Err(CliError::format(path, &format!("unknown key '{other}'"))),
        }
    }
    Ok(())
}

/// Simulates acquisitions for every test case under the given preset:
/// sampled counts, MLEM comparator and the calibration sidecar.
pub fn cmd_degrade(cfg: &RunConfig, preset: ScannerPreset) -> Result<()> {
    let tag = setting_tag(preset);
    let entries = load_entries(cfg)?;
    let tests: Vec<ManifestEntry> =
        entries.into_iter().filter(|e| e.split == Split::Test).collect();
    if tests.is_empty() {
        return Err(CliError::Config("manifest has no test cases".into()));
    }
    let dir = cfg.out_dir.join("degraded");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let scanner = preset_scanner(preset, &cfg.scanner_base());

    run_parallel(&tests, cfg.workers, |entry| {
        let activity = psrg::read_image(&cfg.out_dir.join(&entry.activity_path))?;
        let calibrated = calibrate_to(&scanner, &activity)?;
        let seed = cfg.seed.wrapping_add(case_index(&entry.case_id));
        let acq = degrade(&activity, &calibrated, seed)?;
        let radial = full_geometry(&calibrated).radial_spacing_mm * calibrated.radial_rebin as f64;
        let id = &entry.case_id;
        psrg::write_sinogram(&dir.join(format!("{id}_{tag}_sino.psrg")), &acq.sampled, radial)?;
        psrg::write_image(&dir.join(format!("{id}_{tag}_lr.psrg")), &acq.lr_reference)?;
        write_acq_sidecar(&acq_sidecar_path(&cfg.out_dir, id, tag), &calibrated)?;
        Ok(())
    })
}

// ---------------------------------------------------------------------
// train
// ---------------------------------------------------------------------

fn load_training_cases(cfg: &RunConfig, split: Split) -> Result<Vec<TrainingCase>> {
    let entries = load_entries(cfg)?;
    let mut cases = Vec::new();
    for entry in entries.iter().filter(|e| e.split == split) {
        cases.push(TrainingCase {
            activity: psrg::read_image(&cfg.out_dir.join(&entry.activity_path))?,
            anatomy: psrg::read_image(&cfg.out_dir.join(&entry.anatomy_path))?,
        });
    }
    Ok(cases)
}

/// Trains the denoiser for the variant's conditioning mode; writes the
/// weights file and the loss log. Returns the weights path.
pub fn cmd_train(cfg: &RunConfig, variant: AblationVariant) -> Result<PathBuf> {
    let mode = variant.cond_mode();
    let cases = load_training_cases(cfg, Split::Train)?;
    if cases.is_empty() {
        return Err(CliError::Config("training split is empty".into()));
    }
    let train_cfg = cfg.train_config(mode);
    let out = match train_tiny_denoiser(&cases, &train_cfg) {
        Ok(out) => out,
        Err(TrainError::Setup(e)) => return Err(e.into()),
        Err(TrainError::Diverged(failure)) => {
            // Preserve the last finite checkpoint for post-mortems.
            if let Some(w) = &failure.last_good {
                let path = weights_path(&cfg.out_dir, mode).with_extension("psdw.lastgood");
                weights_io::write_weights(&path, w)?;
            }
            return Err(CliError::Numerical(failure.to_string()));
        }
    };
    let path = weights_path(&cfg.out_dir, mode);
    weights_io::write_weights(&path, &out.weights)?;
    let mut log = String::from("step,loss\n");
    for (step, loss) in &out.loss_log {
        let _ = writeln!(log, "{step},{loss}");
    }
    let log_path = cfg.out_dir.join("weights").join(format!("loss_{}.csv", cond_name(mode)));
    fs::write(&log_path, log).map_err(|e| CliError::io(&log_path, e))?;
    Ok(path)
}

// ---------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------

fn trace_csv(trace: &[StepTrace]) -> String {
    let mut out = String::from("step,t_train,psf_mode,m_t,eta,nll_before,nll_after\n");
    for tr in trace {
        let mode = match tr.psf_mode {
            PsfMode::Identity => "identity",
            PsfMode::Full => "full",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            tr.step, tr.t_train, mode, tr.m_t, tr.eta, tr.nll_before, tr.nll_after
        );
    }
    out
}

pub fn recon_dir(out_dir: &Path, tag: &str, variant: AblationVariant) -> PathBuf {
    out_dir.join("recon").join(tag).join(variant.name())
}

/// Reconstructs every test case under the given preset with the named
/// ablation variant. Writes activity maps, step traces and previews.
pub fn cmd_reconstruct(
    cfg: &RunConfig,
    preset: ScannerPreset,
    variant: AblationVariant,
) -> Result<()> {
    let tag = setting_tag(preset);
    let entries = load_entries(cfg)?;
    let tests: Vec<ManifestEntry> =
        entries.into_iter().filter(|e| e.split == Split::Test).collect();
    if tests.is_empty() {
        return Err(CliError::Config("manifest has no test cases".into()));
    }

    let weights = weights_io::read_weights(&weights_path(&cfg.out_dir, variant.cond_mode()))?;
    let sched = make_schedule(weights.t_train, weights.beta_min, weights.beta_max)
        .map_err(CliError::from)?;
    let denoiser = TinyDenoiser::new(&weights)?;
    let transform = weights.transform;
    let ppcr = variant.apply(&cfg.ppcr());
    let scanner_base = preset_scanner(preset, &cfg.scanner_base());

    let dir = recon_dir(&cfg.out_dir, tag, variant);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;

    run_parallel(&tests, cfg.workers, |entry| {
        let id = &entry.case_id;
        let anatomy = psrg::read_image(&cfg.out_dir.join(&entry.anatomy_path))?;
        let counts = psrg::read_sinogram(
            &cfg.out_dir.join("degraded").join(format!("{id}_{tag}_sino.psrg")),
            SinogramKind::SampledCounts,
        )?;
        let mut scanner = scanner_base.clone();
        read_acq_sidecar(&acq_sidecar_path(&cfg.out_dir, id, tag), &mut scanner)?;
        let seed = cfg.seed.wrapping_add(case_index(id));
        let trace_path = dir.join(format!("{id}_trace.csv"));
        match ppcr_reconstruct(
            &counts, &anatomy, &denoiser, &sched, &scanner, &ppcr, &transform, seed,
        ) {
            Ok((z, state)) => {
                psrg::write_image(&dir.join(format!("{id}_recon.psrg")), &z)?;
                fs::write(&trace_path, trace_csv(&state.trace))
                    .map_err(|e| CliError::io(&trace_path, e))?;
                pgm::write_preview(&dir.join(format!("{id}_recon.pgm")), &z)?;
                Ok(())
            }
            Err(failure) => {
                // The partial trace is still written for post-mortems.
                let _ = fs::write(&trace_path, trace_csv(&failure.trace));
                Err(CliError::Numerical(format!("{id}: {failure}")))
            }
        }
    })
}

// ---------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------

/// Method column order in the CSVs and the summary table.
const METHOD_ORDER: &[&str] =
    &["self", "lr", "full", "no_dc", "no_psf", "no_ppcr", "concat_cond"];

struct CaseEval {
    case_id: String,
    method: String,
    report: metrics::MetricReport,
}

fn eval_setting(cfg: &RunConfig, preset: ScannerPreset) -> Result<Option<String>> {
    let tag = setting_tag(preset);
    let entries = load_entries(cfg)?;
    let tests: Vec<ManifestEntry> =
        entries.into_iter().filter(|e| e.split == Split::Test).collect();
    if tests.is_empty() {
        return Ok(None);
    }
    // The setting participates only if its degraded data exists.
    let first_sino = cfg
        .out_dir
        .join("degraded")
        .join(format!("{}_{tag}_sino.psrg", tests[0].case_id));
    if !first_sino.exists() {
        return Ok(None);
    }

    let mut variants_present = Vec::new();
    for variant in AblationVariant::ALL {
        let dir = recon_dir(&cfg.out_dir, tag, variant);
        let all = tests
            .iter()
            .all(|e| dir.join(format!("{}_recon.psrg", e.case_id)).exists());
        if all {
            variants_present.push(variant);
        }
    }

    let mut rows: Vec<CaseEval> = Vec::new();
    for entry in &tests {
        let truth = psrg::read_image(&cfg.out_dir.join(&entry.activity_path))?;
        let masks: Vec<LesionMask> = entry
            .mask_paths
            .iter()
            .enumerate()
            .map(|(k, rel)| psrg::read_mask(&cfg.out_dir.join(rel), &format!("lesion_{k}")))
            .collect::<Result<_>>()?;

        // Self-test row: the reference against itself.
        rows.push(CaseEval {
            case_id: entry.case_id.clone(),
            method: "self".into(),
            report: metrics::report(&truth, &truth, &masks)?,
        });

        // The MLEM comparator, upsampled onto the fine grid.
        let lr = psrg::read_image(
            &cfg.out_dir.join("degraded").join(format!("{}_{tag}_lr.psrg", entry.case_id)),
        )?;
        let lr_up = lr
            .resample(truth.width(), truth.spacing_mm())
            .map_err(CliError::from)?
            .map(Units::Activity, |v| v.max(0.0))
            .map_err(CliError::from)?;
        rows.push(CaseEval {
            case_id: entry.case_id.clone(),
            method: "lr".into(),
            report: metrics::report(&truth, &lr_up, &masks)?,
        });

        for &variant in &variants_present {
            let recon = psrg::read_image(
                &recon_dir(&cfg.out_dir, tag, variant)
                    .join(format!("{}_recon.psrg", entry.case_id)),
            )?;
            rows.push(CaseEval {
                case_id: entry.case_id.clone(),
                method: variant.name().into(),
                report: metrics::report(&truth, &recon, &masks)?,
            });
        }
    }

    // Deterministic row order: case id, then the fixed method order.
    let method_rank = |m: &str| METHOD_ORDER.iter().position(|&x| x == m).unwrap_or(usize::MAX);
    rows.sort_by(|a, b| {
        a.case_id
            .cmp(&b.case_id)
            .then_with(|| method_rank(&a.method).cmp(&method_rank(&b.method)))
    });

    let dir = cfg.out_dir.join("eval").join(tag);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;

    let mut metrics_csv = String::from("case_id,method,psnr,ssim,nmse\n");
    let mut lesions_csv = String::from("case_id,lesion,method,d_suv_max,d_suv_mean,lesion_nmse\n");
    for row in &rows {
        let _ = writeln!(
            metrics_csv,
            "{},{},{},{},{}",
            row.case_id, row.method, row.report.psnr_db, row.report.ssim, row.report.nmse
        );
        for lesion in &row.report.lesions {
            let _ = writeln!(
                lesions_csv,
                "{},{},{},{},{},{}",
                row.case_id,
                lesion.label,
                row.method,
                lesion.d_suv_max,
                lesion.d_suv_mean,
                lesion.lesion_nmse
            );
        }
    }
    let metrics_path = dir.join("metrics.csv");
    fs::write(&metrics_path, &metrics_csv).map_err(|e| CliError::io(&metrics_path, e))?;
    let lesions_path = dir.join("lesions.csv");
    fs::write(&lesions_path, &lesions_csv).map_err(|e| CliError::io(&lesions_path, e))?;

    // Summary table: mean +/- std per method.
    let mut summary = format!("setting: {tag}\n");
    let _ = writeln!(
        summary,
        "{:<12} {:>16} {:>16} {:>16}",
        "method", "psnr(dB)", "ssim", "nmse"
    );
    for &method in METHOD_ORDER {
        let sel: Vec<&CaseEval> = rows.iter().filter(|r| r.method == method).collect();
        if sel.is_empty() {
            continue;
        }
        let stats = |get: &dyn Fn(&metrics::MetricReport) -> f64| {
            let vals: Vec<f64> = sel.iter().map(|r| get(&r.report)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            (mean, var.sqrt())
        };
        let (pm, ps) = stats(&|r| r.psnr_db);
        let (sm, ss) = stats(&|r| r.ssim);
        let (nm, ns) = stats(&|r| r.nmse);
        let _ = writeln!(
            summary,
            "{:<12} {:>9.2}+-{:<5.2} {:>9.3}+-{:<5.3} {:>9.4}+-{:<5.4}",
            method, pm, ps, sm, ss, nm, ns
        );
    }
    let summary_path = dir.join("summary.txt");
    fs::write(&summary_path, &summary).map_err(|e| CliError::io(&summary_path, e))?;
    Ok(Some(summary))
}

/// Evaluates whatever degraded data and reconstructions exist for both
/// presets. Returns the printed summary.
pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let mut printed = String::new();
    let mut any = false;
    for preset in [ScannerPreset::Standard, ScannerPreset::Ood] {
        if let Some(summary) = eval_setting(cfg, preset)? {
            printed.push_str(&summary);
            printed.push('\n');
            any = true;
        }
    }
    if !any {
        return Err(CliError::Config(
            "nothing to evaluate: run degrade (and reconstruct) first".into(),
        ));
    }
    Ok(printed)
}

// ---------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------

/// Reconstruction plus evaluation over all ablation variants.
pub fn cmd_ablate(cfg: &RunConfig, preset: ScannerPreset) -> Result<String> {
    for variant in AblationVariant::ALL {
        cmd_reconstruct(cfg, preset, variant)?;
    }
    cmd_eval(cfg)
}

/// Measurement-domain consistency of a reconstruction, used by tests and
/// diagnostics: the Poisson NLL of the stored estimate under the stored
/// acquisition.
pub fn recon_nll(cfg: &RunConfig, preset: ScannerPreset, variant: AblationVariant, id: &str) -> Result<f64> {
    let tag = setting_tag(preset);
    let counts = psrg::read_sinogram(
        &cfg.out_dir.join("degraded").join(format!("{id}_{tag}_sino.psrg")),
        SinogramKind::SampledCounts,
    )?;
    let mut scanner = preset_scanner(preset, &cfg.scanner_base());
    read_acq_sidecar(&acq_sidecar_path(&cfg.out_dir, id, tag), &mut scanner)?;
    let z = psrg::read_image(&recon_dir(&cfg.out_dir, tag, variant).join(format!("{id}_recon.psrg")))?;
    poisson_nll(&z, &counts, &scanner, PsfMode::Full, DEFAULT_EPSILON).map_err(CliError::from)
}
