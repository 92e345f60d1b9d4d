use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use hs3::ocrfuse::{attach_fuse, build_fuse_plan, FuseMode, FusePlan};
use hs3::segmetrics::{merge_confusion, ClassMetrics, ClusterMap, ConfusionMatrix, DEFAULT_IGNORE_INDEX};
use hs3::speclust::{AffinityOptions, ClassEmbeddingSet};
use hs3::synthdata::{generate_from, Dataset, SceneSpec};
use hs3::toynet::{
    evaluate, load_checkpoint, save_checkpoint, train, train_network, two_phase_pipeline, Clustering, History, Network,
    NetworkConfig, PipelineConfig, TrainConfig,
};
use hs3::tradeoff::{
    curves_to_csv, derive_supervision_plan, manual_plan, selector_line, AxisScale, Grouping, PlanDerivation,
    SelectorConfig, SupervisionPlan, DEFAULT_GAMMA,
};

use crate::args::*;
use crate::manifest::{self, require_input, require_output};
use crate::usage;

/// Intermediate stages of the reference network.
const INTERMEDIATE_STAGES: usize = 2;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_confusion(path: &Path) -> Result<ConfusionMatrix> {
    let (_, conf) = ConfusionMatrix::from_csv(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))?;
    Ok(conf)
}

fn resolve_gammas(given: &[f64], stages: usize) -> Result<Vec<f64>> {
    if given.is_empty() {
        return Ok(vec![DEFAULT_GAMMA; stages]);
    }
    if given.len() != stages {
        return Err(usage(format!("{} --gamma values for {stages} intermediate stages", given.len())));
    }
    if let Some(g) = given.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
        return Err(usage(format!("--gamma {g} must be finite and non-negative")));
    }
    Ok(given.to_vec())
}

fn resolve_selector(a: &SelectorArgs) -> Result<SelectorConfig> {
    let mode = a.selector.unwrap_or(if a.theta.is_some() { SelectorArg::Theta } else { SelectorArg::Ratio });
    let mut cfg = match mode {
        SelectorArg::Ratio => {
            if a.theta.is_some() {
                return Err(usage("--theta conflicts with --selector ratio"));
            }
            SelectorConfig::ratio()
        }
        SelectorArg::Theta => SelectorConfig::theta(a.theta.ok_or_else(|| usage("--selector theta needs --theta"))?),
    };
    cfg.axis_scale = match (a.axis_x, a.axis_y) {
        (None, None) => None,
        (Some(x), Some(y)) => Some(AxisScale { x, y }),
        _ => return Err(usage("--axis-x and --axis-y go together")),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn clustering(c: ClusteringArg) -> Clustering {
    match c {
        ClusteringArg::Spectral => Clustering::Spectral,
        ClusteringArg::Kmeans => Clustering::Kmeans,
        ClusteringArg::Manual => Clustering::Manual,
    }
}

fn metrics_json(m: &ClassMetrics) -> Value {
    json!({
        "miou": m.miou,
        "pixel_accuracy": m.pixel_accuracy,
        "per_class_iou": m.per_class_iou,
    })
}

fn selection_table(d: &PlanDerivation) -> String {
    let mut out = String::from("stage  k   miou    crossing  clamped\n");
    for (c, s) in d.curves.iter().zip(&d.selections) {
        let miou = c.point(s.k).map_or(f64::NAN, |p| p.miou);
        let crossing = s.crossing_k.map_or("-".to_string(), |x| format!("{x:.3}"));
        out.push_str(&format!("{:<6} {:<3} {:<7.4} {:<9} {}\n", c.stage_id, s.k, miou, crossing, s.clamped));
    }
    out
}

fn line_csv(d: &PlanDerivation, cfg: &SelectorConfig) -> String {
    let k_min = d.curves.iter().flat_map(|c| c.points.first()).map(|p| p.k).min().unwrap_or(2);
    let mut out = String::from("k,miou\n");
    for (k, m) in selector_line(&d.reference, cfg, k_min as f64) {
        out.push_str(&format!("{k},{m}\n"));
    }
    out
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let threads = manifest::threads()?;
    require_output(&a.out)?;
    if let Some(p) = &a.hierarchy_out {
        require_output(p)?;
    }
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let spec = SceneSpec {
        height: a.height,
        width: a.width,
        num_groups: a.groups,
        classes_per_group: a.classes_per_group,
        min_shapes: a.min_shapes,
        max_shapes: a.max_shapes,
        noise: a.noise,
        seed: a.seed,
        ..SceneSpec::default()
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let (ds, hierarchy) = generate_from(&spec, a.first, a.count)?;
    ds.save(&a.out)?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(p) = &a.hierarchy_out {
        write_text(p, &format!("{}\n", serde_json::to_string(&hierarchy.map)?))?;
        outputs.push(p);
    }
    let resolved = json!({ "spec": spec, "first": a.first, "count": a.count, "hierarchy": hierarchy.map });
    manifest::write(a.manifest.as_deref(), &a.out, "gen-data", a, resolved, &outputs, threads)?;
    println!(
        "{} scenes {}x{}, {} classes in {} groups -> {}",
        ds.len(),
        ds.height,
        ds.width,
        ds.num_classes,
        spec.num_groups,
        a.out.display()
    );
    Ok(())
}

pub fn derive(a: &DeriveArgs) -> Result<()> {
    let threads = manifest::threads()?;
    for p in a.stages.iter().chain([&a.final_conf]) {
        require_input(p)?;
    }
    if let Some(p) = &a.embeddings {
        require_input(p)?;
    }
    require_output(&a.plan_out)?;
    require_output(&a.curves_out)?;
    if let Some(p) = &a.line_out {
        require_output(p)?;
    }
    let selector = resolve_selector(&a.selector)?;
    let gammas = resolve_gammas(&a.gammas, a.stages.len())?;
    if a.embeddings.is_some() != (a.clustering == ClusteringArg::Kmeans) {
        return Err(usage("--embeddings is required with, and only with, --clustering kmeans"));
    }

    let final_conf = read_confusion(&a.final_conf)?;
    let k = final_conf.num_classes();
    let mut stages = Vec::new();
    for p in &a.stages {
        let c = read_confusion(p)?;
        if c.num_classes() != k {
            bail!("{}: {} classes, but {} has {k}", p.display(), c.num_classes(), a.final_conf.display());
        }
        stages.push(c);
    }

    let mut outputs: Vec<&Path> = vec![&a.plan_out, &a.curves_out];
    let (plan, derivation) = if a.clustering == ClusteringArg::Manual {
        (manual_plan(k, &gammas)?, None)
    } else {
        let grouping = match &a.embeddings {
            None => Grouping::Spectral(if a.raw_affinity { AffinityOptions::literal() } else { AffinityOptions::default() }),
            Some(path) => {
                let net = load_checkpoint(path)?;
                let cfg = net.config();
                if cfg.num_stages() - 1 != stages.len() || cfg.num_classes() != k {
                    bail!(
                        "{}: {} intermediate heads over {} classes, expected {} over {k}",
                        path.display(),
                        cfg.num_stages() - 1,
                        cfg.num_classes(),
                        stages.len()
                    );
                }
                let sets = (0..stages.len()).map(|i| ClassEmbeddingSet::new(net.head_rows(i))).collect::<hs3::Result<_>>()?;
                Grouping::KMeans(sets)
            }
        };
        let d = derive_supervision_plan(&stages, &final_conf, &selector, &gammas, &grouping, a.seed)?;
        (d.plan.clone(), Some(d))
    };

    write_text(&a.plan_out, &plan.to_json()?)?;
    let curves = derivation.as_ref().map(|d| curves_to_csv(&d.curves)).unwrap_or_else(|| curves_to_csv(&[]));
    write_text(&a.curves_out, &curves)?;
    if let (Some(p), Some(d)) = (&a.line_out, &derivation) {
        write_text(p, &line_csv(d, &selector))?;
        outputs.push(p);
    }
    let resolved = json!({
        "selector": selector,
        "gammas": gammas,
        "num_classes": k,
        "reference_miou": derivation.as_ref().map(|d| d.reference.miou_ref),
        "head_classes": plan.head_classes(),
    });
    manifest::write(a.manifest.as_deref(), &a.plan_out, "derive", a, resolved, &outputs, threads)?;

    match &derivation {
        Some(d) => print!("{}", selection_table(d)),
        None => {
            println!("stage  k");
            for (i, k) in plan.head_classes().iter().enumerate() {
                println!("{:<6} {k}", i + 1);
            }
        }
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).map_err(Into::into)
}

fn write_artifacts(dir: &Path, out: &hs3::toynet::PipelineOutput, selector: &SelectorConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        write_text(&p, &text)?;
        written.push(p);
        Ok(())
    };
    put("plan.json", out.plan.to_json()?)?;
    if let Some(d) = &out.derivation {
        put("curves.csv", curves_to_csv(&d.curves))?;
        put("line.csv", line_csv(d, selector))?;
    }
    let n = out.analysis_confusions.len();
    for (i, c) in out.analysis_confusions.iter().enumerate() {
        let name = if i + 1 == n { "final_confusion.csv".to_string() } else { format!("stage{}_confusion.csv", i + 1) };
        put(&name, c.to_csv(None)?)?;
    }
    if let Some((_, h)) = &out.phase1 {
        put("phase1_history.csv", h.to_csv())?;
    }
    Ok(written)
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let threads = manifest::threads()?;
    require_input(&a.data)?;
    if let Some(v) = &a.val {
        require_input(v)?;
    }
    if let Some(p) = &a.plan {
        require_input(p)?;
    }
    require_output(&a.out)?;
    require_output(&a.history)?;
    if let Some(d) = &a.artifacts {
        if d.is_file() {
            return Err(usage(format!("{}: not a directory", d.display())));
        }
    }
    let hs3_variant = matches!(a.variant, Variant::Hs3 | Variant::Hs3fuse);
    if !hs3_variant && (a.plan.is_some() || a.two_phase) {
        return Err(usage("--plan and --two-phase apply to the hs3 variants only"));
    }
    if hs3_variant && a.plan.is_some() == a.two_phase {
        return Err(usage("hs3 variants need exactly one of --plan and --two-phase"));
    }
    if a.artifacts.is_some() && !a.two_phase {
        return Err(usage("--artifacts needs --two-phase"));
    }
    let selector = resolve_selector(&a.selector)?;
    let gammas = resolve_gammas(&a.gammas, INTERMEDIATE_STAGES)?;
    let tcfg = TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        ignore_index: DEFAULT_IGNORE_INDEX,
        grad_clip: a.grad_clip,
    };
    tcfg.validate().map_err(|e| usage(e.to_string()))?;

    let train_set = load_dataset(&a.data)?;
    let val_set = a.val.as_deref().map(load_dataset).transpose()?;
    let k = train_set.num_classes;
    if let Some(v) = &val_set {
        if (v.height, v.width, v.num_classes) != (train_set.height, train_set.width, k) {
            bail!(
                "{} is {}x{} with {} classes, training set is {}x{} with {k}",
                a.val.as_ref().unwrap().display(),
                v.height,
                v.width,
                v.num_classes,
                train_set.height,
                train_set.width
            );
        }
    }
    let net_cfg = NetworkConfig::reference(train_set.height, train_set.width, &[k; INTERMEDIATE_STAGES], k);
    net_cfg.validate()?;
    let fuse: Option<FusePlan> = match a.variant {
        Variant::Hs3fuse => {
            let mode = match a.fuse_mode {
                FuseModeArg::Concat => FuseMode::Concat,
                FuseModeArg::Add => FuseMode::Add,
            };
            let base = net_cfg.channels[INTERMEDIATE_STAGES];
            Some(build_fuse_plan(base, INTERMEDIATE_STAGES, a.fuse_scale).map_err(|e| usage(e.to_string()))?.with_mode(mode))
        }
        _ => None,
    };

    let val = val_set.as_ref();
    let mut extra_outputs = Vec::new();
    let (net, history, plan): (Network, History, SupervisionPlan) = match a.variant {
        Variant::None | Variant::Ds => {
            let g = if a.variant == Variant::None { vec![0.0; INTERMEDIATE_STAGES] } else { gammas.clone() };
            let plan = SupervisionPlan::deep_supervision(k, &g);
            let (net, h) = train(&train_set, val, &plan, &net_cfg, &tcfg)?;
            (net, h, plan)
        }
        _ if a.two_phase => {
            let mut pc = PipelineConfig::new(selector, gammas.clone());
            pc.clustering = clustering(a.clustering);
            pc.reduced_fraction = a.reduced_fraction;
            pc.warm_start = a.warm_start;
            pc.fuse = fuse.clone();
            let out = two_phase_pipeline(&train_set, val, &net_cfg, &tcfg, &pc)?;
            if let Some(dir) = &a.artifacts {
                extra_outputs = write_artifacts(dir, &out, &selector)?;
            }
            if let Some(d) = &out.derivation {
                print!("{}", selection_table(d));
            }
            if !out.absent_classes.is_empty() {
                eprintln!("warning: classes {:?} absent from the analysis split", out.absent_classes);
            }
            (out.net, out.history, out.plan)
        }
        _ => {
            let path = a.plan.as_ref().unwrap();
            let mut plan = SupervisionPlan::from_json(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))?;
            if plan.num_classes != k || plan.num_stages() != INTERMEDIATE_STAGES {
                bail!(
                    "{}: plan for {} classes and {} stages, expected {k} and {INTERMEDIATE_STAGES}",
                    path.display(),
                    plan.num_classes,
                    plan.num_stages()
                );
            }
            if !a.gammas.is_empty() {
                plan = plan.with_gammas(&gammas)?;
            }
            let mut net = Network::new(net_cfg.with_stage_classes(&plan.head_classes())?, a.seed)?;
            if let Some(fp) = &fuse {
                net = attach_fuse(net, fp.clone(), a.seed)?;
            }
            let (net, h) = train_network(net, &train_set, val, &plan, &tcfg)?;
            (net, h, plan)
        }
    };

    save_checkpoint(&net, &a.out)?;
    write_text(&a.history, &history.to_csv())?;
    let mut outputs: Vec<&Path> = vec![&a.out, &a.history];
    outputs.extend(extra_outputs.iter().map(PathBuf::as_path));
    let resolved = json!({
        "network": net.config(),
        "train": tcfg,
        "selector": selector,
        "plan": plan,
        "fuse": net.fuse_plan(),
        "num_params": net.num_params(),
    });
    manifest::write(a.manifest.as_deref(), &a.out, "train", a, resolved, &outputs, threads)?;

    let last = history.last().expect("at least one epoch");
    let val_txt = last.val_miou.map_or(String::new(), |m| format!(", val mIoU {m:.4}"));
    println!(
        "{:?}: {} epochs, final loss {:.4}{val_txt}, heads {:?}, {} parameters",
        a.variant,
        history.records.len(),
        last.total_loss,
        net.config().head_classes,
        net.num_params()
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let threads = manifest::threads()?;
    require_input(&a.checkpoint)?;
    require_input(&a.data)?;
    if let Some(m) = &a.map {
        require_input(m)?;
    }
    require_output(&a.out)?;
    if let Some(p) = &a.confusion_out {
        require_output(p)?;
    }
    if a.batch_size == 0 {
        return Err(usage("--batch-size must be at least 1"));
    }
    let net = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let cfg = net.config();
    if cfg.num_classes() != ds.num_classes {
        bail!("checkpoint predicts {} classes, dataset has {}", cfg.num_classes(), ds.num_classes);
    }
    if (cfg.height, cfg.width) != (ds.height, ds.width) {
        bail!("checkpoint expects {}x{} images, dataset has {}x{}", cfg.height, cfg.width, ds.height, ds.width);
    }
    let map: Option<ClusterMap> = match &a.map {
        None => None,
        Some(p) => {
            let m: ClusterMap = serde_json::from_str(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?;
            if m.num_source_classes() != ds.num_classes {
                bail!("{}: map over {} classes, dataset has {}", p.display(), m.num_source_classes(), ds.num_classes);
            }
            Some(m)
        }
    };
    let conf = evaluate(&net, &ds, a.batch_size)?;
    let m = conf.metrics();
    let mut report = json!({
        "num_classes": ds.num_classes,
        "samples": ds.len(),
        "pixels": conf.total(),
        "full": metrics_json(&m),
    });
    if let Some(map) = map.as_ref().filter(|m| !m.is_identity()) {
        let merged = merge_confusion(&conf, map)?;
        report["merged"] = json!({
            "num_clusters": map.num_clusters(),
            "assignment": map.assignment(),
            "metrics": metrics_json(&merged.metrics()),
        });
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_text(&a.out, &text)?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(p) = &a.confusion_out {
        write_text(p, &conf.to_csv(None)?)?;
        outputs.push(p);
    }
    manifest::write(a.manifest.as_deref(), &a.out, "eval", a, json!({ "batch_size": a.batch_size }), &outputs, threads)?;
    println!(
        "mIoU {}, pixel accuracy {}",
        m.miou.map_or("n/a".into(), |v| format!("{v:.4}")),
        m.pixel_accuracy.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}
