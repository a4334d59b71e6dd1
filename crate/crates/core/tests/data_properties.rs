use ssan::data::{load_manifest, synth_dataset, write_dataset, Sample, SynthSpec};

fn dist2(a: &Sample, b: &Sample) -> f64 {
    a.image.iter().zip(&b.image).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Leave-one-out 3-nearest-neighbour accuracy on raw pixels.
fn knn3_accuracy(data: &[Sample]) -> f64 {
    let mut correct = 0;
    for (i, s) in data.iter().enumerate() {
        let mut d: Vec<(f64, bool)> = data.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| (dist2(s, o), o.live)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        let live_votes = d[..3].iter().filter(|x| x.1).count();
        if (live_votes >= 2) == s.live {
            correct += 1;
        }
    }
    correct as f64 / data.len() as f64
}

#[test]
fn raw_pixel_knn_separates_liveness_within_a_domain() {
    let data = synth_dataset(&SynthSpec::standard(11), 60).unwrap();
    for d in 0..3 {
        let dom: Vec<Sample> = data.iter().filter(|s| s.domain == d).cloned().collect();
        let acc = knn3_accuracy(&dom);
        eprintln!("domain {d}: 3-NN accuracy {acc:.3}");
        assert!(acc >= 0.9, "domain {d}: {acc}");
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn domain_means_differ_by_brightness_offset() {
    let spec = SynthSpec::standard(3);
    let data = synth_dataset(&spec, 40).unwrap();
    let dm: Vec<f64> = (0..3)
        .map(|d| mean(&data.iter().filter(|s| s.domain == d).map(|s| mean(&s.image)).collect::<Vec<_>>()))
        .collect();
    for a in 0..3 {
        for b in 0..3 {
            let offset = (spec.domains[a].brightness - spec.domains[b].brightness).abs();
            assert!((dm[a] - dm[b]).abs() >= offset - 0.01, "{a} {b}: {dm:?}");
        }
    }
}

fn high_freq_energy(s: &Sample) -> f64 {
    let [c, h, w] = s.shape;
    let mut e = 0.0;
    for ch in 0..c {
        for i in 0..h - 1 {
            for j in 0..w - 1 {
                let at = |y: usize, x: usize| s.image[(ch * h + y) * w + x];
                e += (at(i, j) - at(i + 1, j)).powi(2) + (at(i, j) - at(i, j + 1)).powi(2);
            }
        }
    }
    e / (c * h * w) as f64
}

/// One-way ANOVA F statistic.
fn anova_f(groups: &[Vec<f64>]) -> f64 {
    let all: Vec<f64> = groups.concat();
    let grand = mean(&all);
    let k = groups.len() as f64;
    let n = all.len() as f64;
    let between: f64 = groups.iter().map(|g| g.len() as f64 * (mean(g) - grand).powi(2)).sum::<f64>() / (k - 1.0);
    let within: f64 = groups.iter().map(|g| { let m = mean(g); g.iter().map(|x| (x - m).powi(2)).sum::<f64>() }).sum::<f64>() / (n - k);
    between / within
}

#[test]
fn domain_signal_is_global_and_liveness_signal_is_local() {
    let data = synth_dataset(&SynthSpec::standard(5), 40).unwrap();
    let by_domain: Vec<Vec<f64>> = (0..3).map(|d| data.iter().filter(|s| s.domain == d).map(|s| mean(&s.image)).collect()).collect();
    let f = anova_f(&by_domain);
    assert!(f > 50.0, "domain ANOVA F = {f}");

    for d in 0..3 {
        let live: Vec<f64> = data.iter().filter(|s| s.domain == d && s.live).map(high_freq_energy).collect();
        let spoof: Vec<f64> = data.iter().filter(|s| s.domain == d && !s.live).map(high_freq_energy).collect();
        let max_live = live.iter().cloned().fold(f64::MIN, f64::max);
        let min_spoof = spoof.iter().cloned().fold(f64::MAX, f64::min);
        assert!(min_spoof > max_live, "domain {d}: {min_spoof} vs {max_live}");
    }
}

#[test]
fn manifest_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for with_depth in [false, true] {
        let data = synth_dataset(&SynthSpec { with_depth, ..SynthSpec::standard(2) }, 3).unwrap();
        let sub = dir.path().join(format!("d{with_depth}"));
        let manifest = write_dataset(&sub, &data).unwrap();
        let back = load_manifest(&manifest, Some([3, 32, 32])).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.live, b.live);
            assert_eq!(a.domain, b.domain);
            assert!(a.image.iter().zip(&b.image).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(a.depth_target, b.depth_target);
        }
    }
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.tsv");
    std::fs::write(&empty, "").unwrap();
    assert!(load_manifest(&empty, None).unwrap().is_empty());

    let data = synth_dataset(&SynthSpec::standard(2), 1).unwrap();
    let manifest = write_dataset(dir.path(), &data).unwrap();

    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "sample_00000.sstn\t2\t0\n").unwrap();
    let msg = load_manifest(&bad, None).unwrap_err().to_string();
    assert!(msg.contains("line 1") && msg.contains("out of range"), "{msg}");

    std::fs::write(&bad, "x.sstn 2 0\n").unwrap();
    let msg = load_manifest(&bad, None).unwrap_err().to_string();
    assert!(msg.contains("line 1"), "{msg}");

    std::fs::write(&bad, "sample_00000.sstn\t1\t0\nmissing.sstn\t1\t0\n").unwrap();
    let msg = load_manifest(&bad, None).unwrap_err().to_string();
    assert!(msg.contains("missing.sstn"), "{msg}");

    let msg = load_manifest(&manifest, Some([1, 32, 32])).unwrap_err().to_string();
    assert!(msg.contains("does not match"), "{msg}");
}
