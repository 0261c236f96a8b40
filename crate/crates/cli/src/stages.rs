//! One function per subcommand. Each validates its inputs, writes its
//! artifacts under the output directory and returns the context so the
//! caller can write the stage log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;

use log::{info, warn};
use rayon::prelude::*;
use voxface::dataset::{PreparedData, Split};
use voxface::estimator::{predict_recording, train, Checkpoint, PhonatoryState};
use voxface::geometry::{
    compute_all_ams, read_am_definitions, read_landmarks, read_mesh_binary, read_obj, resolve_all, write_am_csv,
    write_mesh_binary, write_obj_with_scalars, AmDefinition, LandmarkMap, Mesh,
};
use voxface::reconstruction::{
    confidence_weights, filtered_error_maps, per_vertex_error, select_top_ams, ReconstructionProblem,
};
use voxface::shapespace::{build_basis, default_dim, ShapeBasis};
use voxface::stats::{render_bar_chart, run_harness, write_report_csv, AmTestResult, BarChart, FilterLevel, HarnessInput};
use voxface::synthdata::generate;

use crate::artifacts::Ctx;
use crate::data::{field, load_ams, load_phonemes, load_recordings, load_splits, parse_f64, read_rows};
use crate::error::{CliError, Result};
use crate::plot::render_error_maps;

fn level_label(l: f64) -> String {
    FilterLevel(l).label()
}

fn geometry_inputs(ctx: &Ctx) -> Result<(LandmarkMap, Vec<AmDefinition>)> {
    let lm = ctx.data("landmarks.txt");
    let defs = ctx.data("ams.txt");
    ctx.require_file(&lm, "landmark map", "synth")?;
    ctx.require_file(&defs, "AM definitions", "synth")?;
    Ok((read_landmarks(&lm)?, read_am_definitions(&defs)?))
}

fn read_speaker_mesh(ctx: &Ctx, speaker: &str) -> Result<Mesh> {
    let path = ctx.data(&format!("meshes/{speaker}.obj"));
    ctx.require_file(&path, "speaker mesh", "synth")?;
    Ok(read_obj(&path, &ctx.cfg.paths.topology)?)
}

fn load_basis(ctx: &Ctx) -> Result<ShapeBasis> {
    ctx.require_stage("build-basis")?;
    let path = ctx.out("basis.bin");
    ctx.require_file(&path, "shape basis", "build-basis")?;
    Ok(ShapeBasis::load(&path, &ctx.cfg.paths.topology)?)
}

pub fn synth(ctx: &mut Ctx) -> Result<()> {
    let ds = generate(&ctx.cfg.synth_config())?;
    let root = ctx.cfg.paths.data_root.clone();
    ds.emit(&root)?;
    for f in ["recordings.csv", "splits.csv", "planted.csv", "landmarks.txt", "ams.txt", "template.obj"] {
        ctx.stamp_file(&root.join(f))?;
    }
    for s in &ds.speakers {
        ctx.stamp_file(&root.join(format!("meshes/{}.obj", s.id)))?;
    }
    for r in &ds.recordings {
        ctx.record(&root.join(format!("features/{}.mel", r.id)));
        if r.waveform.is_some() {
            ctx.record(&root.join(format!("audio/{}.wav", r.id)));
        }
    }
    info!(
        "wrote {} speakers and {} recordings to {}",
        ds.speakers.len(),
        ds.recordings.len(),
        root.display()
    );
    Ok(())
}

pub fn compute_ams(ctx: &mut Ctx) -> Result<()> {
    ctx.require_data()?;
    let (lm, defs) = geometry_inputs(ctx)?;
    let splits = load_splits(ctx)?;
    let speakers: Vec<&String> = splits.speakers.keys().collect();
    let rows = speakers
        .par_iter()
        .map(|s| {
            let mesh = read_speaker_mesh(ctx, s)?;
            Ok(((*s).clone(), compute_all_ams(&mesh, &lm, &defs)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = defs.iter().map(|d| d.id.clone()).collect();
    let path = ctx.out("ams.csv");
    ctx.ensure_dir(&ctx.cfg.paths.out_dir)?;
    write_am_csv(&path, &ids, &rows)?;
    ctx.stamp_file(&path)?;
    info!("computed {} AMs for {} speakers", ids.len(), rows.len());
    Ok(())
}

pub fn build_basis_stage(ctx: &mut Ctx) -> Result<()> {
    ctx.require_data()?;
    let splits = load_splits(ctx)?;
    let meshes = splits
        .members(Split::Train)
        .par_iter()
        .map(|s| read_speaker_mesh(ctx, s))
        .collect::<Result<Vec<_>>>()?;
    let d = match ctx.cfg.reconstruction.basis_dim {
        0 => default_dim(meshes.len()),
        d => d,
    };
    let basis = build_basis(&meshes, d)?;
    ctx.ensure_dir(&ctx.cfg.paths.out_dir)?;
    let path = ctx.out("basis.bin");
    basis.save(&path)?;
    ctx.record(&path);
    let total: f64 = basis.eigenvalues.iter().sum();
    let mut body = String::from("component,eigenvalue,explained_fraction\n");
    for (i, e) in basis.eigenvalues.iter().enumerate() {
        let _ = writeln!(body, "{i},{e:.9e},{:.6}", e / total.max(f64::MIN_POSITIVE));
    }
    let eig = ctx.out("basis_eigenvalues.csv");
    ctx.write_text(&eig, &body)?;
    info!("built a {}-dimensional basis from {} training meshes", basis.dim(), meshes.len());
    Ok(())
}

pub fn train_stage(ctx: &mut Ctx) -> Result<()> {
    ctx.require_data()?;
    let (ids, ams) = load_ams(ctx)?;
    let splits = load_splits(ctx)?;
    let tc = ctx.cfg.train_config(false);
    let recs = load_recordings(ctx, tc.phonatory.is_some())?;
    let data = PreparedData::prepare(&ids, &recs, &ams, &splits)?;
    let out = train(&data.labeled(Split::Train), &data.labeled(Split::Select), &tc)?;
    let ckpt = Checkpoint {
        config_hash: ctx.hash.clone(),
        seed: ctx.cfg.seed,
        model: out.model,
        mel_norm: data.mel_norm,
        am_norm: data.am_norm,
        selected_iteration: out.selected_iteration,
        selection_error: out.selection_error,
        phonatory: match (out.denoiser, tc.phonatory) {
            (Some(denoiser), Some(config)) => Some(PhonatoryState { config, denoiser }),
            _ => None,
        },
    };
    ctx.ensure_dir(&ctx.cfg.paths.out_dir)?;
    let path = ctx.out("checkpoint.bin");
    ckpt.save(&path)?;
    ctx.record(&path);
    let mut body = String::from("iteration,loss\n");
    for (i, l) in out.loss_trace.iter().enumerate() {
        let _ = writeln!(body, "{},{l:.9}", i + 1);
    }
    ctx.write_text(&ctx.out("train_loss.csv"), &body)?;
    info!(
        "kept iteration {} with selection error {:.4}",
        ckpt.selected_iteration, ckpt.selection_error
    );
    Ok(())
}

fn load_checkpoint(ctx: &Ctx) -> Result<Checkpoint> {
    ctx.require_stage("train")?;
    let path = ctx.out("checkpoint.bin");
    ctx.require_file(&path, "checkpoint", "train")?;
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.config_hash != ctx.hash {
        return Err(CliError::ConfigMismatch {
            stage: "train",
            found: ckpt.config_hash,
            expected: ctx.hash.clone(),
        });
    }
    Ok(ckpt)
}

pub fn predict(ctx: &mut Ctx, split: Split) -> Result<()> {
    let ckpt = load_checkpoint(ctx)?;
    let splits = load_splits(ctx)?;
    let recs: Vec<_> = load_recordings(ctx, false)?
        .into_iter()
        .filter(|r| splits.of(&r.speaker) == Some(split))
        .collect();
    if recs.is_empty() {
        return Err(CliError::Config(format!("no recordings in the {split} split")));
    }
    let frames = ctx.cfg.train.eval_frames;
    let preds = recs
        .par_iter()
        .map(|r| Ok(predict_recording(&ckpt.model, &ckpt.mel_norm.apply(&r.features)?, frames, 1)?))
        .collect::<Result<Vec<_>>>()?;
    let mut body = String::from("recording,speaker,split,am_id,mean,variance,uncertainty\n");
    for (r, p) in recs.iter().zip(&preds) {
        for (k, id) in ckpt.am_ids().iter().enumerate() {
            let _ = writeln!(
                body,
                "{},{},{split},{id},{:.9},{:.9e},{:.9e}",
                r.id,
                r.speaker,
                ckpt.am_norm.invert_one(k, p.means[k]),
                ckpt.am_norm.invert_variance(k, p.variances[k]),
                p.uncertainties[k]
            );
        }
    }
    ctx.write_text(&ctx.out("predictions.csv"), &body)?;
    info!("predicted {} AMs for {} recordings", ckpt.am_ids().len(), recs.len());
    Ok(())
}

pub fn select(ctx: &mut Ctx) -> Result<()> {
    ctx.require_data()?;
    let (ids, ams) = load_ams(ctx)?;
    let splits = load_splits(ctx)?;
    let hc = ctx.cfg.harness_config();
    let recs = load_recordings(ctx, hc.train.phonatory.is_some())?;
    let phonemes = match &ctx.cfg.paths.phonemes {
        Some(p) => Some(load_phonemes(p)?),
        None => None,
    };
    let input = HarnessInput {
        am_ids: &ids,
        recordings: &recs,
        speaker_ams: &ams,
        splits: &splits,
        phonemes: phonemes.as_ref(),
    };
    let res = run_harness(&input, &hc)?;
    ctx.ensure_dir(&ctx.cfg.paths.out_dir)?;
    let report = ctx.out("harness.csv");
    write_report_csv(&report, &res, Some(&ctx.stamp()))?;
    ctx.record(&report);

    let mut runs = String::from("run,seed,level,am_id,ratio\n");
    for (i, r) in res.runs.iter().enumerate() {
        for (l, lv) in res.levels.iter().enumerate() {
            for (k, id) in res.am_ids.iter().enumerate() {
                let _ = writeln!(runs, "{i},{},{},{id},{:.9}", r.seed, lv.label(), r.ratios[l][k]);
            }
        }
    }
    ctx.write_text(&ctx.out("harness_runs.csv"), &runs)?;

    // AM selection uses the unfiltered level when configured, else the first
    let level = res.levels.iter().position(|l| l.0 == 1.0).unwrap_or(0);
    let tests: Vec<AmTestResult> = (0..ids.len()).map(|k| res.test(level, k).clone()).collect();
    let (z, _) = select_top_ams(&tests, ctx.cfg.reconstruction.top_ams);
    let mut sel = String::from("am_id,ci_upper,decision,weight\n");
    for (t, w) in tests.iter().zip(&z) {
        let decision = if t.predictable { "predictable" } else { "not-shown-predictable" };
        let _ = writeln!(sel, "{},{:.6},{decision},{w}", t.am_id, t.ci_upper);
    }
    ctx.write_text(&ctx.out("selection.csv"), &sel)?;

    if !res.phoneme_scores.is_empty() {
        let mut ph = String::from("phoneme,score\n");
        for (label, s) in &res.phoneme_scores {
            let _ = writeln!(ph, "{label},{s:.6}");
        }
        ctx.write_text(&ctx.out("phonemes.csv"), &ph)?;
    }
    info!("predictable AMs: {}", res.predictable_ids(level).join(", "));
    Ok(())
}

struct RecordingPrediction {
    speaker: String,
    means: Vec<f64>,
    uncertainties: Vec<f64>,
}

fn load_predictions(ctx: &Ctx, ids: &[String]) -> Result<BTreeMap<String, RecordingPrediction>> {
    ctx.require_stage("predict")?;
    let path = ctx.out("predictions.csv");
    ctx.require_file(&path, "predictions", "predict")?;
    let col: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut out: BTreeMap<String, RecordingPrediction> = BTreeMap::new();
    for row in read_rows(&path)? {
        let rec = field(&row, "recording", &path)?;
        let am = field(&row, "am_id", &path)?;
        let &k = col.get(am).ok_or_else(|| CliError::Format {
            path: path.clone(),
            msg: format!("unknown AM `{am}`"),
        })?;
        let entry = out.entry(rec.to_string()).or_insert_with(|| RecordingPrediction {
            speaker: row.get("speaker").cloned().unwrap_or_default(),
            means: vec![f64::NAN; ids.len()],
            uncertainties: vec![f64::NAN; ids.len()],
        });
        entry.means[k] = parse_f64(field(&row, "mean", &path)?, &path)?;
        entry.uncertainties[k] = parse_f64(field(&row, "uncertainty", &path)?, &path)?;
    }
    for (rec, p) in &out {
        if p.means.iter().any(|m| m.is_nan()) {
            return Err(CliError::Format {
                path: path.clone(),
                msg: format!("recording `{rec}` lacks predictions for some AMs"),
            });
        }
    }
    Ok(out)
}

fn load_selection(ctx: &Ctx, ids: &[String]) -> Result<Vec<f64>> {
    ctx.require_stage("select")?;
    let path = ctx.out("selection.csv");
    ctx.require_file(&path, "AM selection", "select")?;
    let mut w: BTreeMap<String, f64> = BTreeMap::new();
    for row in read_rows(&path)? {
        w.insert(
            field(&row, "am_id", &path)?.to_string(),
            parse_f64(field(&row, "weight", &path)?, &path)?,
        );
    }
    ids.iter()
        .map(|id| {
            w.get(id).copied().ok_or_else(|| CliError::Format {
                path: path.clone(),
                msg: format!("AM `{id}` missing from the selection"),
            })
        })
        .collect()
}

pub fn fit(ctx: &mut Ctx) -> Result<()> {
    ctx.require_data()?;
    let (lm, defs) = geometry_inputs(ctx)?;
    let ids: Vec<String> = defs.iter().map(|d| d.id.clone()).collect();
    let mask = load_selection(ctx, &ids)?;
    let preds = load_predictions(ctx, &ids)?;
    let basis = load_basis(ctx)?;
    let resolved = resolve_all(&lm, &defs)?;
    let rc = ctx.cfg.reconstruction.clone();
    if mask.iter().all(|w| *w == 0.0) {
        warn!("no AM selected; every fit returns the mean face");
    }
    let items: Vec<(&String, &RecordingPrediction)> = preds.iter().collect();
    let fits = items
        .par_iter()
        .map(|(rec, p)| {
            let weights = if rc.confidence_weighting {
                confidence_weights(&mask, &p.uncertainties)
            } else {
                mask.clone()
            };
            let mut problem = ReconstructionProblem::new(&basis, &resolved, p.means.clone(), weights, rc.lambda)?;
            problem.max_iter = rc.max_iter;
            let fit = problem.fit()?;
            let selected: Vec<f64> = (0..ids.len())
                .filter(|&k| mask[k] > 0.0)
                .map(|k| p.uncertainties[k])
                .collect();
            let pool = if selected.is_empty() { &p.uncertainties } else { &selected };
            let u = pool.iter().sum::<f64>() / pool.len() as f64;
            Ok(((*rec).clone(), u, fit))
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = ctx.out("fits");
    ctx.ensure_dir(&dir)?;
    let mut body = String::from("recording,speaker,uncertainty,converged,iterations,objective\n");
    for (rec, u, f) in &fits {
        let path = dir.join(format!("{rec}.bin"));
        write_mesh_binary(&path, &f.mesh)?;
        ctx.record(&path);
        let _ = writeln!(
            body,
            "{rec},{},{u:.9e},{},{},{:.9e}",
            preds[rec].speaker,
            f.converged,
            f.iterations,
            f.objective_trace.last().copied().unwrap_or(f64::NAN)
        );
    }
    ctx.write_text(&ctx.out("fits.csv"), &body)?;
    let unconverged = fits.iter().filter(|f| !f.2.converged).count();
    if unconverged > 0 {
        warn!("{unconverged} fits hit the iteration cap");
    }
    info!("fitted {} recordings", fits.len());
    Ok(())
}

pub fn evaluate(ctx: &mut Ctx) -> Result<()> {
    ctx.require_data()?;
    ctx.require_stage("fit")?;
    let path = ctx.out("fits.csv");
    ctx.require_file(&path, "fit table", "fit")?;
    let basis = load_basis(ctx)?;
    let rows = read_rows(&path)?;
    let topo = ctx.cfg.paths.topology.clone();
    let errors = rows
        .par_iter()
        .map(|row| {
            let rec = field(row, "recording", &path)?.to_string();
            let speaker = field(row, "speaker", &path)?.to_string();
            let u = parse_f64(field(row, "uncertainty", &path)?, &path)?;
            let fitted = read_mesh_binary(&ctx.out(&format!("fits/{rec}.bin")), &topo)?;
            let truth = read_speaker_mesh(ctx, &speaker)?;
            Ok((rec, speaker, u, per_vertex_error(&fitted, &truth)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut body = String::from("recording,speaker,uncertainty,mean_error_mm\n");
    for (rec, spk, u, e) in &errors {
        let _ = writeln!(body, "{rec},{spk},{u:.9e},{:.9}", e.iter().sum::<f64>() / e.len() as f64);
    }
    ctx.write_text(&ctx.out("errors.csv"), &body)?;

    let fits: Vec<(String, f64, Vec<f64>)> = errors.into_iter().map(|(r, _, u, e)| (r, u, e)).collect();
    let maps = filtered_error_maps(&fits, &ctx.cfg.harness.levels)?;
    let mut table = String::from("vertex");
    for m in &maps {
        let _ = write!(table, ",error_{}", level_label(m.level).trim_end_matches('%'));
    }
    table.push('\n');
    for v in 0..basis.vertex_count {
        let _ = write!(table, "{v}");
        for m in &maps {
            let _ = write!(table, ",{:.9}", m.field[v]);
        }
        table.push('\n');
    }
    ctx.write_text(&ctx.out("error_maps.csv"), &table)?;
    let mut levels = String::from("level,retained,mean_error_mm\n");
    let mean_face = basis.mean_mesh();
    for m in &maps {
        let _ = writeln!(levels, "{},{},{:.9}", level_label(m.level), m.retained, m.mean);
        let obj = ctx.out(&format!("error_map_{}.obj", level_label(m.level).trim_end_matches('%')));
        write_obj_with_scalars(&obj, &mean_face, &m.field)?;
        ctx.stamp_file(&obj)?;
    }
    ctx.write_text(&ctx.out("error_levels.csv"), &levels)?;
    for m in &maps {
        info!("{} level: mean per-vertex error {:.4} mm over {} fits", level_label(m.level), m.mean, m.retained);
    }
    Ok(())
}

pub fn report(ctx: &mut Ctx) -> Result<()> {
    ctx.require_stage("select")?;
    let dir = ctx.out("report");
    ctx.ensure_dir(&dir)?;
    let stamp = ctx.stamp();

    let harness = ctx.out("harness.csv");
    ctx.require_file(&harness, "harness report", "select")?;
    let rows = read_rows(&harness)?;
    let first = rows.first().map(|r| r["level"].clone()).unwrap_or_default();
    let mut bars = Vec::new();
    let mut highlight = Vec::new();
    let mut predictable = Vec::new();
    for r in rows.iter().filter(|r| r["level"] == first) {
        let ci = parse_f64(field(r, "ci_upper", &harness)?, &harness)?;
        let yes = field(r, "decision", &harness)? == "predictable";
        bars.push((r["am_id"].clone(), 1.0 - ci));
        highlight.push(yes);
        if yes {
            predictable.push(r["am_id"].clone());
        }
    }
    let chart = BarChart {
        title: format!("AM predictability at the {first} level"),
        value_label: "1 - CI_u".into(),
        bars,
        highlight,
    };
    let svg = dir.join("am_predictability.svg");
    write_svg(ctx, &svg, &render_bar_chart(&chart, Some(&stamp)))?;

    let phon = ctx.out("phonemes.csv");
    if phon.exists() {
        let mut bars = Vec::new();
        for r in read_rows(&phon)? {
            bars.push((r["phoneme"].clone(), parse_f64(field(&r, "score", &phon)?, &phon)?));
        }
        let chart = BarChart {
            title: "Phoneme-level predictability".into(),
            value_label: "mean 1 - CI_u".into(),
            highlight: vec![false; bars.len()],
            bars,
        };
        write_svg(ctx, &dir.join("phonemes.svg"), &render_bar_chart(&chart, Some(&stamp)))?;
    }

    let mut summary = format!("predictable_ams,{}\n", predictable.join(" "));
    let maps = ctx.out("error_maps.csv");
    if maps.exists() {
        ctx.require_stage("evaluate")?;
        let basis = load_basis(ctx)?;
        let rows = read_rows(&maps)?;
        let cols: Vec<String> = rows
            .first()
            .map(|r| r.keys().filter(|k| k.starts_with("error_")).cloned().collect())
            .unwrap_or_default();
        let mut panels = Vec::new();
        for c in &cols {
            let field_vals = rows
                .iter()
                .map(|r| parse_f64(&r[c], &maps))
                .collect::<Result<Vec<f64>>>()?;
            panels.push((format!("{}% most confident", &c["error_".len()..]), field_vals));
        }
        // widest level first
        panels.sort_by_key(|(l, _)| std::cmp::Reverse(l.split('%').next().and_then(|n| n.parse::<u32>().ok()).unwrap_or(0)));
        write_svg(ctx, &dir.join("error_maps.svg"), &render_error_maps(&basis.mean_mesh(), &panels, &stamp))?;
        let lv = ctx.out("error_levels.csv");
        for r in read_rows(&lv)? {
            let _ = writeln!(summary, "mean_error_mm_{},{}", r["level"], r["mean_error_mm"]);
        }
    }
    ctx.write_text(&dir.join("summary.csv"), &format!("key,value\n{summary}"))?;
    println!("predictable AMs: {}", predictable.join(", "));
    Ok(())
}

fn write_svg(ctx: &mut Ctx, path: &std::path::Path, svg: &str) -> Result<()> {
    fs::write(path, svg).map_err(|e| CliError::io(path, e))?;
    ctx.record(path);
    Ok(())
}
