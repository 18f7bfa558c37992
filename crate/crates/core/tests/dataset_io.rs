use fundus_core::dataset_io::{generate_synthetic, load_split, train_count, write_dataset, SynthConfig, TEST_CSV, TRAIN_CSV};
use fundus_core::geometry::{BoxPriors, LandmarkClass};

fn small() -> SynthConfig {
    SynthConfig { width: 48, height: 32, disc_radius_min: 2.0, disc_radius_max: 2.5, strokes: 1, seed: 3, ..SynthConfig::default() }
}

#[test]
fn idrid_sized_split_has_the_reference_counts() {
    let samples = generate_synthetic(&small(), 516).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(write_dataset(dir.path(), &samples, 0.8).unwrap(), (413, 103));
    let train = load_split(dir.path(), TRAIN_CSV, &BoxPriors::default()).unwrap();
    let test = load_split(dir.path(), TEST_CSV, &BoxPriors::default()).unwrap();
    assert_eq!((train.records.len(), test.records.len()), (413, 103));
    assert!(train.rejected.is_empty() && test.rejected.is_empty());
    assert_eq!(train_count(80, 0.8), 64);
}

#[test]
fn csv_round_trip_reproduces_annotations() {
    let samples = generate_synthetic(&SynthConfig { seed: 11, ..small() }, 30).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &samples, 0.5).unwrap();
    let mut loaded = load_split(dir.path(), TRAIN_CSV, &BoxPriors::default()).unwrap().records;
    loaded.extend(load_split(dir.path(), TEST_CSV, &BoxPriors::default()).unwrap().records);
    assert_eq!(loaded.len(), samples.len());
    for (rec, s) in loaded.iter().zip(&samples) {
        assert_eq!(rec.annotation.image_id, s.annotation.image_id);
        assert_eq!(rec.annotation.native_size, s.annotation.native_size);
        for c in LandmarkClass::ALL {
            assert_eq!(rec.annotation.point(c), s.annotation.point(c));
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[test]
fn fovea_offsets_follow_the_configured_distribution() {
    let cfg =
        SynthConfig { width: 96, height: 64, disc_radius_min: 4.0, disc_radius_max: 5.5, strokes: 0, seed: 21, ..SynthConfig::default() };
    let samples = generate_synthetic(&cfg, 1000).unwrap();
    let (cx, cy) = ((cfg.width as f64 - 1.0) / 2.0, (cfg.height as f64 - 1.0) / 2.0);
    let mut ratio = Vec::new();
    let mut angle = Vec::new();
    for s in &samples {
        let od = s.annotation.point(LandmarkClass::OpticDisc).unwrap();
        let fov = s.annotation.point(LandmarkClass::Fovea).unwrap();
        ratio.push(od.distance(fov) / s.disc_radius);
        let to_center = (cy - od.y).atan2(cx - od.x);
        let to_fovea = (fov.y - od.y).atan2(fov.x - od.x);
        let mut d = to_fovea - to_center;
        d = (d + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
        angle.push(d.to_degrees());
    }
    let n = samples.len() as f64;
    let checks = [("distance / radius", ratio, cfg.offset_mean, cfg.offset_std), ("angle (deg)", angle, 0.0, cfg.angle_std_deg)];
    for (name, v, mu, sigma) in checks {
        let (m, s) = mean_std(&v);
        assert!((m - mu).abs() <= 3.0 * sigma / n.sqrt(), "{name}: mean {m} vs {mu}");
        assert!((s - sigma).abs() <= 3.0 * sigma / (2.0 * (n - 1.0)).sqrt(), "{name}: std {s} vs {sigma}");
    }
}
