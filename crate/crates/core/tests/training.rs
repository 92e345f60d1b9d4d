use hs3::segmetrics::ClusterMap;
use hs3::synthdata::{generate_from, Dataset, SceneSpec};
use hs3::toynet::*;
use hs3::tradeoff::{manual_plan, SelectorConfig, SupervisionPlan};

fn data(count: usize, size: usize) -> Dataset {
    let spec = SceneSpec {
        height: size,
        width: size,
        min_size: size / 4,
        max_size: size / 2,
        ..SceneSpec::default()
    };
    generate_from(&spec, 0, count).unwrap().0
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

fn cfg(ds: &Dataset) -> NetworkConfig {
    let k = ds.num_classes;
    NetworkConfig::reference(ds.height, ds.width, &[k, k], k)
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let ds = data(8, 32);
    let c = cfg(&ds);
    let start = Network::new(c.clone(), 3).unwrap();
    let tc = TrainConfig { learning_rate: 0.0, ..quick(2, 3) };
    let (net, _) = train(&ds, None, &SupervisionPlan::deep_supervision(12, &[0.4, 0.4]), &c, &tc).unwrap();
    assert_eq!(checkpoint_bytes(&net).unwrap(), checkpoint_bytes(&start).unwrap());
}

#[test]
fn training_is_deterministic() {
    let ds = data(12, 32);
    let plan = SupervisionPlan::deep_supervision(12, &[0.4, 0.4]);
    let (a, ha) = train(&ds, Some(&ds), &plan, &cfg(&ds), &quick(2, 9)).unwrap();
    let (b, hb) = train(&ds, Some(&ds), &plan, &cfg(&ds), &quick(2, 9)).unwrap();
    assert_eq!(checkpoint_bytes(&a).unwrap(), checkpoint_bytes(&b).unwrap());
    assert_eq!(ha.to_csv(), hb.to_csv());
    let (c, _) = train(&ds, None, &plan, &cfg(&ds), &quick(2, 10)).unwrap();
    assert_ne!(checkpoint_bytes(&a).unwrap(), checkpoint_bytes(&c).unwrap());
}

#[test]
fn overfits_a_handful_of_scenes() {
    let ds = data(4, 32);
    let plan = SupervisionPlan::deep_supervision(12, &[0.4, 0.4]);
    let (_, h) = train(&ds, None, &plan, &cfg(&ds), &quick(200, 1)).unwrap();
    let first = h.records[0].total_loss;
    let last = h.last().unwrap().total_loss;
    assert!(last < 0.3 * first, "{first} -> {last}");
}

#[test]
fn unsupervised_heads_do_not_touch_the_final_path() {
    // Different auxiliary class sets, all with zero weight: trunk and final
    // head must follow exactly the same trajectory.
    let ds = data(8, 32);
    let coarse = SupervisionPlan::from_maps(
        12,
        vec![ClusterMap::new(3, (0..12).map(|c| c / 4).collect()).unwrap(), ClusterMap::identity(12)],
        &[0.0, 0.0],
    )
    .unwrap();
    let full = SupervisionPlan::deep_supervision(12, &[0.0, 0.0]);
    let (a, ha) = train(&ds, None, &full, &cfg(&ds), &quick(2, 5)).unwrap();
    let c2 = cfg(&ds).with_stage_classes(&coarse.head_classes()).unwrap();
    let (b, hb) = train_network(Network::new(c2, 5).unwrap(), &ds, None, &coarse, &quick(2, 5)).unwrap();
    assert_eq!(ha.to_csv(), hb.to_csv());
    assert!(!ha.to_csv().contains("stage1_loss"));
    for p in a.params().params().iter().filter(|p| !p.name.starts_with("head1")) {
        assert_eq!(&p.value[..], b.params().get(&p.name), "{}", p.name);
    }
}

#[test]
fn theta_zero_pipeline_is_deep_supervision() {
    let ds = data(20, 32);
    let gammas = vec![0.4, 0.4];
    let (dsn, dsh) = train(&ds, None, &SupervisionPlan::deep_supervision(12, &gammas), &cfg(&ds), &quick(2, 4)).unwrap();
    let out = two_phase_pipeline(&ds, None, &cfg(&ds), &quick(2, 4), &PipelineConfig::new(SelectorConfig::theta(0.0), gammas)).unwrap();
    assert_eq!(out.plan.head_classes(), vec![12, 12]);
    assert_eq!(out.history.to_csv(), dsh.to_csv());
    assert_eq!(checkpoint_bytes(&out.net).unwrap(), checkpoint_bytes(&dsn).unwrap());
    assert_eq!(out.analysis_confusions.len(), 3);
    assert!(out.phase1.is_some());
}

#[test]
fn manual_pipeline_skips_the_analysis_phase() {
    let ds = data(8, 32);
    let mut pc = PipelineConfig::new(SelectorConfig::ratio(), vec![0.4, 0.4]);
    pc.clustering = Clustering::Manual;
    let out = two_phase_pipeline(&ds, None, &cfg(&ds), &quick(1, 0), &pc).unwrap();
    assert!(out.phase1.is_none() && out.derivation.is_none());
    assert_eq!(out.plan, manual_plan(12, &[0.4, 0.4]).unwrap());
}

#[test]
fn kmeans_pipeline_yields_a_valid_plan() {
    let ds = data(20, 32);
    let mut pc = PipelineConfig::new(SelectorConfig::ratio(), vec![0.4, 0.4]);
    pc.clustering = Clustering::Kmeans;
    pc.warm_start = true;
    let out = two_phase_pipeline(&ds, None, &cfg(&ds), &quick(1, 0), &pc).unwrap();
    out.plan.validate().unwrap();
    assert_eq!(out.net.config().head_classes[..2], out.plan.head_classes()[..]);
}

#[test]
fn divergence_reports_the_epoch() {
    let ds = data(4, 32);
    let tc = TrainConfig { learning_rate: 1e300, ..quick(3, 0) };
    let err = train(&ds, None, &SupervisionPlan::deep_supervision(12, &[0.4, 0.4]), &cfg(&ds), &tc).unwrap_err();
    assert!(err.to_string().contains("epoch"), "{err}");
}

#[test]
fn full_network_separates_within_group_classes() {
    let spec = SceneSpec::default();
    let (train_set, _) = generate_from(&spec, 0, 400).unwrap();
    let (test, _) = generate_from(&spec, 400, 40).unwrap();
    let tc = TrainConfig { epochs: 8, ..TrainConfig::default() };
    let (net, _) = train(&train_set, None, &SupervisionPlan::deep_supervision(12, &[0.4, 0.4]), &cfg(&train_set), &tc).unwrap();
    let miou = evaluate(&net, &test, 16).unwrap().metrics().miou.unwrap();
    assert!(miou > 0.5, "final mIoU {miou}");
}
