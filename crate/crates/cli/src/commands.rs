use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use infinet::checkpoint::load_checkpoint;
use infinet::gradcheck::GradCheckConfig;
use infinet::gradsuite::{known_op, run_check, OP_NAMES};
use infinet::inference::{aggregate_views, argmax_labels, segment_view, write_probabilities, DiceReport};
use infinet::phantom::{class_counts, generate_phantom, PhantomSpec, CLASS_NAMES};
use infinet::training::{
    format_config, parse_config, train_all_views, view_checkpoint_name, ModelSpec, TrainConfig, TrainReport, Trainer,
};
use infinet::volume::{
    decode_labels, decode_volume, extract_slice, label_slice, read_labels, read_volume, write_labels, write_volume,
    Axis, LabelVolume, LabeledVolume, VOLUME_MAGIC,
};

use crate::pgm::{encode_pgm, intensity_gray, label_gray};
use crate::{CliError, EvaluateArgs, ExportArgs, GenPhantomArgs, GradCheckArgs, InferArgs, TrainArgs};

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn gen_phantom(args: &GenPhantomArgs) -> Result<(), CliError> {
    let mut spec = match &args.spec {
        Some(p) => PhantomSpec::from_kv(&read_text(p)?)?,
        None => PhantomSpec::default(),
    };
    if let Some(d) = args.dims {
        spec.dims = d;
    }
    let vol = generate_phantom(&spec, args.seed)?;
    write_volume(&vol, &args.out)?;
    let counts = class_counts(&vol.labels, vol.num_classes);
    let summary: Vec<String> = counts
        .iter()
        .zip(CLASS_NAMES)
        .map(|(c, n)| format!("{n}={c}"))
        .collect();
    println!(
        "wrote {} dims={:?} seed={} iso_intense={} {}",
        args.out.display(),
        vol.dims,
        args.seed,
        spec.is_iso_intense(),
        summary.join(" ")
    );
    Ok(())
}

/// Every `.ivol` file in `dir`, in name order.
pub fn load_volumes(dir: &Path) -> Result<Vec<LabeledVolume>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Data(format!("data dir {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ivol"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("no .ivol files in {}", dir.display())));
    }
    let mut vols = Vec::with_capacity(paths.len());
    for p in &paths {
        let v = read_volume(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        if let Some(first) = vols.first().map(|f: &LabeledVolume| f.dims) {
            if v.dims != first {
                return Err(CliError::Data(format!(
                    "{}: dims {:?} differ from {:?}",
                    p.display(),
                    v.dims,
                    first
                )));
            }
        }
        vols.push(v);
    }
    Ok(vols)
}

fn effective_config(args: &TrainArgs) -> Result<(TrainConfig, ModelSpec), CliError> {
    let (mut cfg, mut spec) = match &args.config {
        Some(p) => parse_config(&read_text(p)?)?,
        None => (TrainConfig::default(), ModelSpec::default()),
    };
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = args.$field {
                cfg.$field = v;
            }
        };
    }
    set!(lr0);
    set!(lr_decay_factor);
    set!(lr_decay_every);
    set!(momentum);
    set!(batch_size);
    set!(max_epochs);
    set!(seed);
    set!(patience);
    set!(min_improvement);
    if let Some(axis) = args.view.and_then(|v| v.axis()) {
        cfg.view_axis = axis;
    }
    if let Some(a) = args.arch {
        spec.arch = a.into();
    }
    if let Some(c) = args.base_channels {
        spec.config = spec.config.with_base_channels(c);
    }
    cfg.validate()?;
    Ok((cfg, spec))
}

fn write_report(out: &Path, report: &TrainReport) -> Result<(), CliError> {
    let stem = report.view.name();
    write_text(&out.join(format!("{stem}.report.txt")), &report.to_text())?;
    write_text(&out.join(format!("{stem}.report.json")), &report.to_json())?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let (cfg, spec) = effective_config(args)?;
    let all = args.view == Some(crate::ViewArg::All);
    if all && args.resume.is_some() {
        return Err(CliError::Usage("--resume works with a single view".into()));
    }
    let vols = load_volumes(&args.data_dir)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("config.txt"), &format_config(&cfg, &spec))?;
    log::info!("{} training volumes of dims {:?}", vols.len(), vols[0].dims);
    if all {
        let results = train_all_views(&vols, spec, &cfg, Some(&args.out), args.parallel)?;
        for (report, _) in &results {
            write_report(&args.out, report)?;
        }
        return Ok(());
    }
    let mut trainer = match &args.resume {
        Some(p) => {
            log::info!("resuming from {} with its stored config", p.display());
            let mut ck = load_checkpoint(p)?;
            if let (Some(c), Some(n)) = (ck.train_config.as_mut(), args.max_epochs) {
                c.max_epochs = n;
            }
            Trainer::resume(&vols, ck)?
        }
        None => Trainer::new(&vols, spec, cfg)?,
    };
    let path = args.out.join(view_checkpoint_name(trainer.config().view_axis));
    let report = trainer.run(Some(&path))?;
    write_report(&args.out, &report)
}

pub fn infer(args: &InferArgs) -> Result<(), CliError> {
    if args.batch == 0 {
        return Err(CliError::Usage("--batch must be positive".into()));
    }
    let vol = read_volume(&args.volume)?;
    if args.checkpoints.len() == 1 {
        log::warn!("one checkpoint given: single-view mode, no view aggregation");
    }
    let start = Instant::now();
    let mut views = Vec::with_capacity(args.checkpoints.len());
    let mut provenance = Vec::new();
    let mut seen: Vec<Axis> = Vec::new();
    for path in &args.checkpoints {
        let ck = load_checkpoint(path)?;
        let axis = ck.view.unwrap_or_else(|| {
            log::warn!("{} records no view; using axial", path.display());
            Axis::Axial
        });
        if seen.contains(&axis) {
            log::warn!("view {axis} supplied more than once");
        }
        seen.push(axis);
        let t = Instant::now();
        let p = segment_view(&ck.model, &vol, axis, args.batch)?;
        log::info!("{axis}: {:.2}s", t.elapsed().as_secs_f64());
        provenance.push(format!("{axis}:seed={}:epoch={}", ck.seed, ck.epoch));
        views.push((axis, p));
    }
    let refs: Vec<_> = views.iter().map(|(_, p)| p).collect();
    let agg = aggregate_views(&refs)?;
    let labels = argmax_labels(&agg);
    let prov = format!("infer[{}]", provenance.join(","));
    let spec_id = if vol.spec_id.is_empty() {
        prov.clone()
    } else {
        format!("{} {prov}", vol.spec_id)
    };
    let out = LabelVolume {
        dims: vol.dims,
        voxel_size: vol.voxel_size,
        labels,
        num_classes: agg.num_classes,
        seed: vol.seed,
        spec_id,
    };
    write_labels(&out, &args.out)?;
    if let Some(dir) = &args.prob_dir {
        create_dir(dir)?;
        for ((axis, p), prov) in views.iter().zip(&provenance) {
            write_probabilities(p, prov, dir.join(format!("{axis}.iprob")))?;
        }
        write_probabilities(&agg, &prov, dir.join("aggregated.iprob"))?;
    }
    println!(
        "wrote {} views={} seconds={:.2}",
        args.out.display(),
        views.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let pred = read_labels(&args.pred)?;
    let truth = read_labels(&args.truth)?;
    if pred.dims != truth.dims {
        return Err(CliError::Data(format!(
            "dimension mismatch: prediction {:?} vs truth {:?}",
            pred.dims, truth.dims
        )));
    }
    let report = DiceReport::compute(&pred.labels, &truth.labels, truth.num_classes)?;
    print!("{}", report.to_table());
    println!("{}", report.to_json());
    if let Some(p) = &args.json {
        write_text(p, &report.to_json())?;
    }
    Ok(())
}

pub fn grad_check(args: &GradCheckArgs) -> Result<(), CliError> {
    let ops: Vec<&str> = if args.op == "all" {
        OP_NAMES.to_vec()
    } else if known_op(&args.op) {
        vec![args.op.as_str()]
    } else {
        return Err(CliError::Usage(format!(
            "unknown op `{}`; expected all or one of {}",
            args.op,
            OP_NAMES.join(", ")
        )));
    };
    let positive = |v: f64| v > 0.0 && v.is_finite();
    if args.trials == 0 || !positive(args.step) || !positive(args.tolerance) {
        return Err(CliError::Usage(
            "--trials, --step and --tolerance must be positive".into(),
        ));
    }
    let cfg = GradCheckConfig {
        h: args.step,
        tolerance: args.tolerance,
        seed: args.seed,
        ..GradCheckConfig::default()
    };
    let start = Instant::now();
    let mut summaries = Vec::with_capacity(ops.len());
    for op in ops {
        let s = run_check(op, args.trials, &cfg)?;
        println!(
            "{:<12} trials={} checked={} skipped_kinks={} max_rel_error={:.3e} tolerance={:.0e} {}",
            s.op,
            s.trials,
            s.checked,
            s.skipped_kinks,
            s.max_rel_error,
            s.tolerance,
            if s.passed { "PASS" } else { "FAIL" }
        );
        summaries.push(s);
    }
    let failed: Vec<&str> = summaries.iter().filter(|s| !s.passed).map(|s| s.op.as_str()).collect();
    println!("seconds={:.2}", start.elapsed().as_secs_f64());
    if let Some(p) = &args.json {
        write_text(
            p,
            &serde_json::to_string_pretty(&summaries).expect("summary serializes"),
        )?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

pub fn export_slices(args: &ExportArgs) -> Result<(), CliError> {
    let bytes = fs::read(&args.volume).map_err(|e| CliError::Data(format!("{}: {e}", args.volume.display())))?;
    let (labels, vol) = if bytes.starts_with(VOLUME_MAGIC.as_bytes()) {
        let v = decode_volume(&bytes)?;
        (LabelVolume::from(&v), Some(v))
    } else {
        (decode_labels(&bytes)?, None)
    };
    create_dir(&args.out_dir)?;
    let axis = args.axis;
    let (count, h, w) = axis.slice_geometry(labels.dims);
    let header = |channel: &str, j: usize| {
        format!(
            "source={} seed={} spec={}\naxis={axis} slice={j} channel={channel}",
            args.volume.display(),
            labels.seed,
            labels.spec_id
        )
    };
    let mut written = 0;
    for j in 0..count {
        let mut images: Vec<(&str, Vec<u8>)> = Vec::with_capacity(3);
        if let Some(v) = &vol {
            let s = extract_slice(v, axis, j)?;
            images.push(("t1", s.t1.iter().map(|&x| intensity_gray(x)).collect()));
            images.push(("t2", s.t2.iter().map(|&x| intensity_gray(x)).collect()));
        }
        let gray = label_slice(&labels.labels, labels.dims, axis, j)
            .into_iter()
            .map(|l| label_gray(l, labels.num_classes))
            .collect();
        images.push(("labels", gray));
        for (channel, px) in images {
            let path = args.out_dir.join(format!("{channel}_{axis}_{j:04}.pgm"));
            write_text(&path, &encode_pgm(w, h, &px, &header(channel, j)))?;
            written += 1;
        }
    }
    println!(
        "wrote {written} images ({count} slices along {axis}) to {}",
        args.out_dir.display()
    );
    Ok(())
}
