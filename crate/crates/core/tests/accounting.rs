use std::collections::BTreeSet;

use dcd_core::accounting::*;
use dcd_core::layers::{default_latent_dim, Act, Category, ConvSpec, DcdConfig, DcdVariant, Dynamic, VanillaConfig};
use dcd_core::zoo::{build_mobilenetv2, build_resnet, build_task_net, Arm, Model, Placement};
use dcd_core::AttentionMode;

#[test]
fn closed_form_examples() {
    assert_eq!(dcd_complexity_formula(64, 8, 16), 4096 + 1024 + 768);
    assert_eq!(dcd_complexity_formula(64, 8, 16), 5888);
    // (1 + 3/16)·C² + 2C√C at L = √C
    assert_eq!(64 * 64 + 3 * 64 * 64 / 16 + 2 * 64 * 8, 5888);
    for c in [16u64, 64, 256, 1024] {
        let l = (c as f64).sqrt() as u64;
        assert_eq!(dcd_complexity_formula(c, l, 16), c * c + 3 * c * c / 16 + 2 * c * l);
    }
}

#[test]
fn closed_form_static_limit() {
    for c in [8u64, 64, 512] {
        let f = dcd_complexity_formula(c, 0, c);
        assert_eq!(f, c * c + 2 * c);
        assert!((f as f64 - (c * c) as f64) / ((c * c) as f64) <= 2.0 / c as f64);
    }
}

#[test]
fn closed_form_stays_below_four_c_squared() {
    for c in 8..=1024usize {
        let l = default_latent_dim(c) as u64;
        let c = c as u64;
        assert!(dcd_complexity_formula(c, l, 16) < 4 * c * c, "C={c}");
    }
}

#[test]
fn layer_param_examples() {
    let mut s = ConvSpec::conv("l", 64, 64, 1, 1, Act::None);
    let cats = layer_params(&s).unwrap();
    assert_eq!(cats[&Category::StaticKernel], 4096);
    assert_eq!(cats[&Category::BatchNorm], 128);

    s.dynamic = Dynamic::Vanilla(VanillaConfig {
        kernels: 4,
        mode: AttentionMode::Softmax,
        temperature: 1.0,
        hidden: None,
    });
    let cats = layer_params(&s).unwrap();
    assert_eq!(cats[&Category::StaticKernel], 16384);
    assert_eq!(cats[&Category::DynamicBranch], 64 * 4 + 4);
}

#[test]
fn dcd_layer_counts_match_formula_scope() {
    let s =
        ConvSpec::conv("l", 64, 64, 1, 1, Act::None).with_dynamic(Dynamic::Dcd(DcdConfig::new(DcdVariant::Pointwise { blocks: 1 }, 16)));
    let cats = layer_params(&s).unwrap();
    let (c, l, h) = (64u64, 8u64, 4u64);
    let weights_only = cats.values().sum::<u64>() - cats[&Category::BatchNorm] - (h + c + l * l);
    assert_eq!(weights_only, dcd_complexity_formula(c, l, 16));
}

#[test]
fn layer_madds_examples() {
    let s = ConvSpec::conv("l", 64, 64, 1, 1, Act::None);
    assert_eq!(layer_madds(&s, (8, 8), (8, 8)).unwrap(), 262144);
    let d = ConvSpec::depthwise("d", 64, 3, 1, Act::None);
    assert_eq!(layer_madds(&d, (8, 8), (8, 8)).unwrap(), 36864);
}

#[test]
fn dcd_pointwise_madds_breakdown() {
    let s =
        ConvSpec::conv("l", 64, 32, 1, 1, Act::None).with_dynamic(Dynamic::Dcd(DcdConfig::new(DcdVariant::Pointwise { blocks: 1 }, 16)));
    let (ci, co, l, h, hw) = (64u64, 32, 8, 4, 64);
    let conv = co * ci * hw;
    let pool = ci * hw;
    let fc = ci * h + h * (co + l * l);
    let scale = co * ci;
    let chain = l * l * ci + co * l * ci;
    assert_eq!(layer_madds(&s, (8, 8), (8, 8)).unwrap(), conv + pool + fc + scale + chain);
}

#[test]
fn report_totals_are_row_sums() {
    let placements: BTreeSet<Placement> = [Placement::Pw, Placement::Dw, Placement::Cls].into();
    for g in [
        build_mobilenetv2(0.5, &placements, None).unwrap(),
        build_resnet(18, true, None).unwrap(),
        build_resnet(50, false, None).unwrap(),
    ] {
        let r = count(&g, 224).unwrap();
        assert_eq!(r.total_params, r.rows.iter().map(|x| x.params).sum::<u64>());
        assert_eq!(r.total_madds, r.rows.iter().map(|x| x.madds).sum::<u64>());
        assert_eq!(r.total_params, r.by_category.values().sum::<u64>());
        assert_eq!(r.rows.len(), g.convs().len());
    }
}

#[test]
fn allocated_scalars_equal_counted_params() {
    let all: BTreeSet<Placement> = [Placement::Pw, Placement::Dw, Placement::Cls].into();
    let graphs = vec![
        build_mobilenetv2(0.35, &all, None).unwrap(),
        build_mobilenetv2(0.5, &BTreeSet::new(), None).unwrap(),
        build_resnet(10, true, None).unwrap(),
        build_task_net(8, 16, 4, 16, Arm::Dcd { r: 4 }).unwrap(),
        build_task_net(
            8,
            16,
            4,
            16,
            Arm::Vanilla {
                kernels: 4,
                temperature: 30.0,
            },
        )
        .unwrap(),
    ];
    for g in graphs {
        let counted = count_params(&g).unwrap().total_params;
        let model = Model::new(g.clone(), 1).unwrap();
        assert_eq!(model.num_params() as u64, counted, "{}", g.name);
    }
}

#[test]
fn static_baselines() {
    let m05 = count_params(&build_mobilenetv2(0.5, &BTreeSet::new(), None).unwrap()).unwrap();
    assert!((m05.total_params as f64 - 2.0e6).abs() <= 0.05e6, "{}", m05.total_params);
    let m10 = count_params(&build_mobilenetv2(1.0, &BTreeSet::new(), None).unwrap()).unwrap();
    assert!((m10.total_params as f64 - 3.5e6).abs() <= 0.05e6, "{}", m10.total_params);
    let r18 = count_params(&build_resnet(18, false, None).unwrap()).unwrap();
    assert!((r18.backbone_params() as f64 - 11.1e6).abs() <= 0.1e6, "{}", r18.backbone_params());
    // the widely quoted ResNet-18 figure, classifier included
    assert_eq!(r18.total_params, 11_689_512);
    let r50 = count_params(&build_resnet(50, false, None).unwrap()).unwrap();
    assert_eq!(r50.total_params, 25_557_032);
}

#[test]
fn static_madds_scale_with_resolution() {
    // every ResNet feature map at 224 is exactly 7× the one at 32 per side
    // except the classifier, which always sees 1×1
    let g = build_resnet(18, false, None).unwrap();
    let conv = |res| {
        let r = count_madds(&g, res).unwrap();
        r.total_madds - r.rows.last().unwrap().madds
    };
    assert_eq!(conv(224), 49 * conv(32));
    assert_eq!(count_madds(&g, 32).unwrap().rows.last().unwrap().madds, 512 * 1000);
}

#[test]
fn ablation_axes_are_expressible() {
    let pw: BTreeSet<Placement> = [Placement::Pw].into();
    let mut last = 0;
    for mult in [0.25, 0.5, 0.75, 1.0] {
        let mut g = build_mobilenetv2(0.5, &pw, None).unwrap();
        g.set_l_mult(mult);
        g.validate().unwrap();
        let p = count_params(&g).unwrap().category(Category::Projections);
        assert!(p > last);
        last = p;
    }
    let mut by_blocks = Vec::new();
    for b in [1, 2, 4, 8] {
        let mut g = build_mobilenetv2(0.5, &pw, None).unwrap();
        g.set_blocks(b);
        g.validate().unwrap();
        by_blocks.push(count_params(&g).unwrap().total_params);
    }
    assert!(by_blocks[3] < by_blocks[0]);
    let mut totals = Vec::new();
    for set in [
        vec![],
        vec![Placement::Dw],
        vec![Placement::Pw],
        vec![Placement::Cls],
        vec![Placement::Pw, Placement::Cls],
        vec![Placement::Dw, Placement::Pw, Placement::Cls],
    ] {
        let set: BTreeSet<Placement> = set.into_iter().collect();
        totals.push(count_params(&build_mobilenetv2(0.5, &set, None).unwrap()).unwrap().total_params);
    }
    assert!(totals[1..].iter().all(|t| *t > totals[0]));
    assert!(totals[5] > totals[4] && totals[4] > totals[2] && totals[4] > totals[3]);
}

#[test]
fn golden_rows_are_well_formed() {
    let rows = golden_rows();
    assert_eq!(rows.len(), 7);
    for r in &rows {
        let g = golden_graph(r.id).unwrap();
        g.validate().unwrap();
        let res = check_golden(r).unwrap();
        assert!(res.params > 0 && res.madds > 0);
    }
    assert!(golden_graph("nope").is_err());
}
