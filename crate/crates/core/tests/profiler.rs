mod common;

use indexmap::IndexMap;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikedrive::model::{repeat_over_time, PassOptions, Probe};
use spikedrive::profiler::{
    ann_layers, attention_maps, energy_of_layers, energy_spike_model, energy_vsa_layer, sfr_trace, site_schema,
    spike_layers, EnergyConstants, FiringRateTrace, LayerSpec, OpKind, RateSource,
};
use spikedrive::{build_model, ModelConfig};

fn trace_with(sites: &[(&str, f64)], timesteps: usize) -> FiringRateTrace {
    FiringRateTrace {
        timesteps,
        sites: sites.iter().map(|(s, r)| (s.to_string(), vec![*r; timesteps])).collect::<IndexMap<_, _>>(),
        input_density: vec![0.0; timesteps],
    }
}

#[test]
fn single_linear_fixture() {
    let layer = LayerSpec { name: "linear".into(), kind: OpKind::Ac, flops: 196 * 512 * 512, rate: RateSource::Site("x".into()) };
    let rows = energy_of_layers(&[layer], &trace_with(&[("x", 0.25)], 4), &EnergyConstants::default()).unwrap();
    // 0.9 * 4 * 0.25 * 196 * 512^2
    let want = 0.9 * 196.0 * 262_144.0;
    assert!((rows[0].energy_pj - want).abs() <= 1e-6 * want, "{}", rows[0].energy_pj);
    assert!((want - 4.624e7).abs() / 4.624e7 < 1e-3);
}

#[test]
fn gate_row_with_published_rates() {
    let cfg = ModelConfig::imagenet(8, 512);
    let mut trace = FiringRateTrace::uniform(&cfg, 0.0);
    for l in 1..=8 {
        trace.sites[&format!("Block{l}/SDSA/Q_S")] = vec![0.0091; 4];
        trace.sites[&format!("Block{l}/SDSA/K_S")] = vec![0.0090; 4];
        trace.sites[&format!("Block{l}/SDSA/V_S")] = vec![0.1649; 4];
    }
    let report = energy_spike_model(&cfg, &trace, &EnergyConstants::default()).unwrap();
    let row = report.rows.iter().find(|r| r.layer == "blocks.0.attn.fqkv").unwrap();
    let want = 0.9 * 4.0 * (0.0091 + 0.0090) * 196.0 * 512.0;
    assert!((row.energy_pj - want).abs() < 1e-9);
    assert!((row.energy_pj - 6539.0).abs() < 1.0, "{}", row.energy_pj);
}

#[test]
fn zero_trace_costs_nothing() {
    for (l, d) in [(8, 384), (2, 64)] {
        let cfg = ModelConfig::imagenet(l, d);
        let report = energy_spike_model(&cfg, &FiringRateTrace::uniform(&cfg, 0.0), &EnergyConstants::default()).unwrap();
        assert_eq!(report.total_pj(), 0.0);
        assert!(report.ann_total_pj() > 0.0);
    }
}

#[test]
fn totals_recompute_from_count_columns() {
    let cfg = ModelConfig::small(2, 32, 10);
    let model = build_model(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let imgs = Array4::from_shape_simple_fn((4, 3, 32, 32), || rng.random::<f64>());
    let trace = sfr_trace(&model, imgs.view()).unwrap();
    let c = EnergyConstants { e_mac: 4.6, e_ac: 0.9 };
    let report = energy_spike_model(&cfg, &trace, &c).unwrap();
    for rows in [&report.rows, &report.ann_rows] {
        let mut sum = 0.0;
        for r in rows.iter() {
            assert!(r.macs >= 0.0 && r.acs >= 0.0);
            let e = r.macs * c.e_mac + r.acs * c.e_ac;
            assert!((e - r.energy_pj).abs() <= 1e-9 * e.max(1.0), "{}", r.layer);
            sum += e;
        }
        let total: f64 = rows.iter().map(|r| r.energy_pj).sum();
        assert!((total - sum).abs() <= 1e-9 * sum.max(1.0));
    }
    // The CSV TOTAL line agrees with the rows.
    let csv = report.to_csv(&[]);
    let total_line = csv.lines().find(|l| l.starts_with("TOTAL")).unwrap();
    let printed: f64 = total_line.rsplit(',').next().unwrap().parse().unwrap();
    assert!((printed - report.total_pj()).abs() <= 1e-9 * report.total_pj());
}

#[test]
fn every_layer_has_a_row() {
    let cfg = ModelConfig::small(3, 32, 10);
    let model = build_model(&cfg, 0).unwrap();
    let spike = spike_layers(&cfg).unwrap();
    let ann = ann_layers(&cfg).unwrap();
    // Every weight tensor of the built model maps onto some energy row.
    for t in model.store().tensors() {
        if !t.name.ends_with(".weight") {
            continue;
        }
        let owner = t.name.trim_end_matches(".weight");
        let owner = ["attn.q", "attn.k", "attn.v"].iter().fold(owner.to_string(), |o, p| o.replace(p, "attn.qkv"));
        assert!(spike.iter().any(|r| r.name == owner), "no spike row for {}", t.name);
        assert!(ann.iter().any(|r| r.name == owner), "no ANN row for {}", t.name);
    }
    // The ANN attention carries the five vanilla rows per block.
    for l in 0..3 {
        for part in ["qkv", "fqkv", "scale", "softmax", "proj"] {
            assert!(ann.iter().any(|r| r.name == format!("blocks.{l}.attn.{part}")));
        }
    }
}

#[test]
fn traced_rates_are_probabilities() {
    let cfg = ModelConfig { height: 16, width: 16, ..ModelConfig::small(1, 16, 3) };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let schema = site_schema(&cfg);
    for trial in 0..100 {
        let model = build_model(&cfg, trial).unwrap();
        let imgs = Array4::from_shape_simple_fn((2, 3, 16, 16), || rng.random::<f64>());
        let trace = sfr_trace(&model, imgs.view()).unwrap();
        assert_eq!(trace.sites.keys().cloned().collect::<Vec<_>>(), schema);
        assert!(trace.sites.values().flatten().all(|r| (0.0..=1.0).contains(r)));
        let report = energy_spike_model(&cfg, &trace, &EnergyConstants::default()).unwrap();
        let gate = report.rows.iter().find(|r| r.layer.ends_with("fqkv")).unwrap();
        assert!((0.0..=2.0).contains(&gate.rate));
    }
}

#[test]
fn zero_input_with_zero_biases_is_silent() {
    let cfg = ModelConfig { height: 16, width: 16, ..ModelConfig::small(2, 16, 3) };
    let model = build_model(&cfg, 2).unwrap();
    let trace = sfr_trace(&model, Array4::zeros((2, 3, 16, 16)).view()).unwrap();
    assert!(trace.sites.values().flatten().all(|&r| r == 0.0), "{:?}", trace.sites);
    assert_eq!(trace.input_average(), 0.0);
}

#[test]
fn forced_half_on_input_rate() {
    // Stage 4 output pinned by its normalization shift: +2 on even channels, -2 on odd ones.
    let cfg = ModelConfig { height: 16, width: 16, ..ModelConfig::small(1, 8, 3) };
    let mut model = build_model(&cfg, 0).unwrap();
    for t in model.store_mut().tensors_mut() {
        match t.name.as_str() {
            "sps.conv4.weight" | "sps.rpe.weight" => t.value.fill(0.0),
            "sps.conv4.bn.beta" => t.value.iter_mut().enumerate().for_each(|(i, v)| *v = if i % 2 == 0 { 2.0 } else { -2.0 }),
            _ => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let imgs = Array4::from_shape_simple_fn((3, 3, 16, 16), || rng.random::<f64>());
    let trace = sfr_trace(&model, imgs.view()).unwrap();
    assert_eq!(trace.average("Block1/SDSA/Input").unwrap(), 0.5);
    assert_eq!(trace.average("SPS/Conv4").unwrap(), 0.5);
}

#[test]
fn full_resolution_maps_are_fourteen_square() {
    let cfg = ModelConfig::imagenet(1, 16);
    let mut model = build_model(&cfg, 4).unwrap();
    common::wake_attention(&mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..2 {
        let img = Array4::from_shape_simple_fn((1, 3, 224, 224), || rng.random::<f64>());
        let mut probe = Probe::capturing_attention();
        model.forward(repeat_over_time(img.view(), 4).view(), PassOptions::inference(), Some(&mut probe)).unwrap();
        let maps = attention_maps(&probe, 4, 1, cfg.grid()).unwrap();
        assert_eq!(maps.len(), 1);
        let m = &maps[0];
        assert_eq!(m.v_s.dim(), (14, 14));
        assert_eq!(m.v_hat.dim(), (14, 14));
        assert!(m.v_s.mean().unwrap() > 0.0 && m.v_hat.mean().unwrap() > 0.0);
        assert!(m.v_hat.mean().unwrap() <= m.v_s.mean().unwrap());
        assert!(m.v_s.iter().zip(m.v_hat.iter()).all(|(a, b)| b <= a));
    }
}

#[test]
fn published_vsa_energies() {
    let c = EnergyConstants::default();
    for (d, published) in [(384, 6.7e8), (512, 1.2e9), (768, 2.7e9)] {
        let e = energy_vsa_layer(196, d, &c);
        assert!((e - published).abs() / published <= 0.05, "D={d}: {e:e} vs {published:e}");
    }
}

#[test]
fn trace_csv_mirrors_site_schema() {
    let cfg = ModelConfig::imagenet(8, 512);
    let csv = FiringRateTrace::uniform(&cfg, 0.25).to_csv(&[]);
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next().unwrap(), "site,t1,t2,t3,t4,average");
    let sites: Vec<String> = lines.map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(sites, site_schema(&cfg));
    assert_eq!(sites.len(), 4 + 8 * 8 + 1);
}
