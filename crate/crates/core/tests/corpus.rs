use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use resnet_asr::audio::{load_wav, quantized, Waveform};
use resnet_asr::corpus::synth::{self, CLASS_PARTIALS};
use resnet_asr::corpus::*;
use resnet_asr::{Error, Rng};

fn power(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64
}

fn snr_of(speech: &[f32], noise: &[f32]) -> f64 {
    10.0 * (power(speech) / power(noise)).log10()
}

fn wave(v: Vec<f32>) -> Waveform {
    Waveform::new(v).unwrap()
}

#[test]
fn equal_power_at_zero_db_gives_unit_gain() {
    let s = wave(vec![0.1; 500]);
    let n = wave(
        (0..300)
            .map(|i| if i % 2 == 0 { 0.1 } else { -0.1 })
            .collect(),
    );
    let m = mix_at_snr(&s, &n, 0.0, &mut Rng::new(1)).unwrap();
    assert!((m.gain - 1.0).abs() < 1e-9);
    assert_eq!(m.clip_scale, 1.0);
    assert_eq!(m.mixed.len(), 500);
}

#[test]
fn equal_power_at_twenty_db_gives_tenth_gain() {
    let s = wave(vec![0.1; 500]);
    let n = wave(
        (0..300)
            .map(|i| if i % 3 == 0 { 0.1 } else { -0.1 })
            .collect(),
    );
    let m = mix_at_snr(&s, &n, 20.0, &mut Rng::new(2)).unwrap();
    assert!((m.gain - 0.1).abs() < 1e-9);
    assert!((snr_of(&m.speech, &m.noise) - 20.0).abs() < 0.1);
}

#[test]
fn undefined_snr_inputs_are_errors() {
    let s = wave(vec![0.1; 50]);
    let empty = Waveform {
        samples: vec![],
        sample_rate: 8000,
    };
    assert!(matches!(
        mix_at_snr(&s, &empty, 10.0, &mut Rng::new(0)),
        Err(Error::UndefinedSnr(_))
    ));
    assert!(matches!(
        mix_at_snr(&wave(vec![0.0; 50]), &s, 10.0, &mut Rng::new(0)),
        Err(Error::UndefinedSnr(_))
    ));
    assert!(matches!(
        mix_at_snr(&s, &wave(vec![0.0; 50]), 10.0, &mut Rng::new(0)),
        Err(Error::UndefinedSnr(_))
    ));
}

#[test]
fn clipping_rescales_both_components() {
    let s = wave(vec![0.9; 400]);
    let n = wave(
        (0..400)
            .map(|i| if i % 2 == 0 { 0.9 } else { -0.9 })
            .collect(),
    );
    let m = mix_at_snr(&s, &n, -5.0, &mut Rng::new(3)).unwrap();
    assert!(m.clip_scale < 1.0);
    assert!(m.mixed.samples.iter().all(|v| v.abs() <= 1.0));
    assert!((snr_of(&m.speech, &m.noise) + 5.0).abs() < 0.1);
    for ((x, s), n) in m.mixed.samples.iter().zip(&m.speech).zip(&m.noise) {
        assert!((x - (s + n)).abs() < 1e-6);
    }
}

#[test]
fn short_noise_is_tiled_from_offset() {
    let s = wave(vec![0.2; 10]);
    let n = wave(vec![0.1, 0.2, 0.3]);
    let m = mix_at_snr(&s, &n, 0.0, &mut Rng::new(7)).unwrap();
    let base = m.noise[0] / n.samples[m.offset];
    for (i, v) in m.noise.iter().enumerate() {
        let want = n.samples[(m.offset + i) % 3] * base;
        assert!((v - want).abs() < 1e-6);
    }
}

#[test]
fn snr_fidelity_over_random_triples() {
    let mut r = Rng::new(99);
    for i in 0..1000 {
        let len = 200 + r.below(2000);
        let s = wave((0..len).map(|_| (0.3 * r.normal()) as f32).collect());
        let nlen = 1 + r.below(4000);
        let n = wave((0..nlen).map(|_| (r.uniform() - 0.5) as f32).collect());
        let snr = ALL_SNRS[r.below(5)];
        let m = mix_at_snr(&s, &n, snr as f64, &mut r.split(i)).unwrap();
        let got = snr_of(&m.speech, &m.noise);
        assert!((got - snr as f64).abs() < 0.1, "{snr} -> {got}");
    }
}

#[test]
fn class_partial_sets_are_distinct() {
    for (a, pa) in CLASS_PARTIALS.iter().enumerate() {
        for (b, pb) in CLASS_PARTIALS.iter().enumerate().skip(a + 1) {
            assert_ne!(pa, pb, "{a} vs {b}");
        }
    }
    assert_ne!(CLASS_PARTIALS[0], CLASS_PARTIALS[5]);
}

fn dft_power(x: &[f32], f: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let ph = 2.0 * std::f64::consts::PI * f * i as f64 / 8000.0;
        re += v as f64 * ph.cos();
        im -= v as f64 * ph.sin();
    }
    re * re + im * im
}

#[test]
fn tokens_carry_their_class_partials() {
    let mut rng = Rng::new(4);
    for label in [0, 5, 10] {
        let t = synth::synth_token(label, &mut rng);
        let secs = t.len() as f64 / 8000.0;
        assert!((0.5..=0.8).contains(&secs), "{secs}");
        let other = (label + 5) % NUM_CLASSES;
        let own = dft_power(&t.samples, CLASS_PARTIALS[label][0]);
        let foreign: Vec<f64> = CLASS_PARTIALS[other]
            .iter()
            .filter(|f| !CLASS_PARTIALS[label].contains(f))
            .map(|&f| dft_power(&t.samples, f))
            .collect();
        assert!(!foreign.is_empty());
        assert!(foreign.iter().all(|&p| p * 100.0 < own), "label {label}");
    }
}

#[test]
fn noise_generators_are_seeded_and_shaped() {
    for kind in NoiseType::SCENARIOS {
        let a = synth::synth_noise(kind, 8000, &mut Rng::new(5));
        let b = synth::synth_noise(kind, 8000, &mut Rng::new(5));
        assert_eq!(a, b);
        assert!(a.power() > 0.0);
        assert!(a.samples.iter().all(|v| v.abs() <= 0.5 + 1e-6));
    }
    let car = synth::synth_noise(NoiseType::Car, 8000, &mut Rng::new(6));
    assert!(dft_power(&car.samples, 100.0) > 10.0 * dft_power(&car.samples, 3000.0));
}

#[test]
fn count_spreads_remainder_over_low_classes() {
    let c = SynthCount::TotalPerMode(2412).per_class().unwrap();
    assert_eq!(c.iter().sum::<usize>(), 2412);
    assert_eq!(c[0], 220);
    assert_eq!(c[10], 219);
    assert!(SynthCount::PerClass(0).per_class().is_err());
    assert!(SynthCount::TotalPerMode(5).per_class().is_err());
}

#[test]
fn full_scale_plan_and_binary_histogram() {
    let cfg = SynthConfig::new(SynthCount::TotalPerMode(2412), 1);
    let m = Manifest::new("/corpus", synth::plan(&cfg).unwrap());
    assert_eq!(m.len(), 4824);
    let clean = m.records.iter().filter(|r| r.mode == Mode::Clean).count();
    assert_eq!(clean, 2412);
    let b = relabel_for_binary(&m);
    assert_eq!(b.num_classes, 2);
    assert_eq!(b.histogram(), vec![2412, 2412]);
    assert!(b
        .records
        .iter()
        .all(|r| (r.label == 0) == (r.mode == Mode::Clean)));
    let snrs: std::collections::BTreeSet<_> = m.records.iter().filter_map(|r| r.snr_db).collect();
    assert_eq!(snrs.into_iter().collect::<Vec<_>>(), vec![5, 10, 15, 20]);
}

fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn synth_corpus_is_byte_identical_on_rerun() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::new(SynthCount::PerClass(2), 17);
    let ma = synth_corpus(a.path(), &cfg).unwrap();
    synth_corpus(b.path(), &cfg).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta.len(), 44 + 1);
    assert_eq!(ta, tb);
    assert_eq!(Manifest::read(&a.path().join("manifest.csv")).unwrap(), ma);

    let c = tempfile::tempdir().unwrap();
    synth_corpus(c.path(), &SynthConfig::new(SynthCount::PerClass(2), 18)).unwrap();
    assert_ne!(read_tree(c.path()), ta);
}

#[test]
fn written_noisy_files_match_their_components() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::new(SynthCount::PerClass(4), 23);
    let m = synth_corpus(dir.path(), &cfg).unwrap();
    for (i, r) in m.records.iter().enumerate() {
        let Some(snr) = r.snr_db else { continue };
        let mut rng = Rng::new(cfg.seed).split(i as u64);
        let mix = synth::synth_noisy(r.label, r.noise_type, snr, &mut rng).unwrap();
        assert!((snr_of(&mix.speech, &mix.noise) - snr as f64).abs() < 0.1);
        let on_disk = load_wav(&m.resolve(r)).unwrap();
        assert_eq!(on_disk, quantized(&mix.mixed));
    }
}

fn toy_manifest(per_class: usize) -> Manifest {
    let mut recs = Vec::new();
    for label in 0..NUM_CLASSES {
        for j in 0..per_class {
            recs.push(UtteranceRecord::clean(format!("c{label}_{j}.wav"), label));
        }
    }
    Manifest::new("/tmp/x", recs)
}

#[test]
fn split_takes_forty_percent_per_class() {
    let m = toy_manifest(100);
    let s = split(&m, TEST_FRACTION, 3).unwrap();
    assert_eq!(s.test.histogram(), vec![40; NUM_CLASSES]);
    assert_eq!(s.train.histogram(), vec![60; NUM_CLASSES]);
    assert_eq!(split(&m, TEST_FRACTION, 3).unwrap(), s);
    assert_ne!(split(&m, TEST_FRACTION, 4).unwrap(), s);
}

#[test]
fn split_is_a_partition() {
    let cfg = SynthConfig::new(SynthCount::PerClass(23), 2);
    let m = Manifest::new("/c", synth::plan(&cfg).unwrap());
    let s = split(&m, TEST_FRACTION, 9).unwrap();
    let mut all: Vec<_> = s
        .train
        .records
        .iter()
        .chain(&s.test.records)
        .cloned()
        .collect();
    assert_eq!(all.len(), m.len());
    all.sort();
    let mut want = m.records.clone();
    want.sort();
    assert_eq!(all, want);
    let train: std::collections::HashSet<_> = s.train.records.iter().map(|r| &r.path).collect();
    assert!(s.test.records.iter().all(|r| !train.contains(&r.path)));
    for h in [s.test.histogram(), s.train.histogram()] {
        let frac = s.test.histogram().iter().sum::<usize>() as f64 / m.len() as f64;
        assert!((frac - 0.4).abs() <= 0.02, "{frac} {h:?}");
    }
}

#[test]
fn split_rejects_sparse_classes() {
    let mut m = toy_manifest(3);
    m.records.retain(|r| {
        !(r.label == 4 && r.path.to_string_lossy().ends_with("_0.wav")
            || r.label == 4 && r.path.to_string_lossy().ends_with("_1.wav"))
    });
    assert!(matches!(
        split(&m, TEST_FRACTION, 0),
        Err(Error::TooFewRecords { label: 4, count: 1 })
    ));
}

#[test]
fn manifest_csv_round_trip_and_header() {
    let mut m = toy_manifest(2);
    m.records
        .push(UtteranceRecord::noisy("n/a.wav", 3, NoiseType::Babble, -5));
    let text = m.to_csv().unwrap();
    assert!(text.starts_with("path,label,mode,noise_type,snr_db\n"));
    assert!(text.contains("c0_0.wav,0,clean,none,\n"));
    assert!(text.contains("n/a.wav,3,noisy,babble,-5\n"));
    let back = Manifest::parse(&text, PathBuf::from("/tmp/x")).unwrap();
    assert_eq!(back, m);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    Manifest::new(dir.path(), m.records.clone())
        .write(&p)
        .unwrap();
    assert_eq!(Manifest::read(&p).unwrap().records, m.records);
}

#[test]
fn manifest_rejects_bad_rows() {
    let root = PathBuf::from("/");
    assert!(Manifest::parse("path,label,mode\na,1,clean\n", root.clone()).is_err());
    let bad = [
        "a.wav,11,clean,none,\n",
        "a.wav,1,clean,car,\n",
        "a.wav,1,noisy,car,\n",
        "a.wav,1,noisy,none,5\n",
        "a.wav,1,noisy,car,7\n",
        "a.wav,1,loud,car,5\n",
    ];
    for row in bad {
        let text = format!("{MANIFEST_HEADER}\n{row}");
        assert!(
            matches!(
                Manifest::parse(&text, root.clone()),
                Err(Error::Manifest(_))
            ),
            "{row}"
        );
    }
}

#[test]
fn writing_elsewhere_rebases_paths() {
    let dir = tempfile::tempdir().unwrap();
    let other = tempfile::tempdir().unwrap();
    let m = Manifest::new(dir.path(), vec![UtteranceRecord::clean("clean/a.wav", 1)]);
    let p = other.path().join("m.csv");
    m.write(&p).unwrap();
    let back = Manifest::read(&p).unwrap();
    assert_eq!(
        back.resolve(&back.records[0]),
        dir.path().join("clean/a.wav")
    );
}

#[test]
fn dataset_loads_normalized_canvas() {
    use resnet_asr::audio::{FeatureConfig, FeatureStats, MelExtractor};
    let dir = tempfile::tempdir().unwrap();
    let m = synth_corpus(dir.path(), &SynthConfig::new(SynthCount::PerClass(2), 5)).unwrap();
    let cfg = FeatureConfig {
        n_mels: 20,
        frames: 32,
        hop: 160,
        ..Default::default()
    };
    let ex = MelExtractor::new(&cfg).unwrap();
    let raw = load_raw(&m, &ex).unwrap();
    let stats = FeatureStats::fit(&raw).unwrap();
    let ds = Dataset::from_raw(&m, &raw, &stats, cfg.frames).unwrap();
    assert_eq!(ds.len(), 44);
    assert_eq!(ds.input_shape(), Some([1, 20, 32]));
    let (x, y) = ds.batch(&[0, 43]).unwrap();
    assert_eq!(x.shape(), &[2, 1, 20, 32]);
    assert_eq!(y, vec![0, 10]);

    let missing = Manifest::new(dir.path(), vec![UtteranceRecord::clean("nope.wav", 0)]);
    assert!(matches!(load_raw(&missing, &ex), Err(Error::Audio { .. })));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn stratification_error_at_most_one(sizes in proptest::collection::vec(2usize..40, NUM_CLASSES), seed in 0u64..1000) {
            let mut recs = Vec::new();
            for (label, &n) in sizes.iter().enumerate() {
                for j in 0..n {
                    recs.push(if j % 3 == 0 {
                        UtteranceRecord::clean(format!("{label}_{j}"), label)
                    } else {
                        UtteranceRecord::noisy(format!("{label}_{j}"), label, NoiseType::Car, TRAIN_SNRS[j % 4])
                    });
                }
            }
            let m = Manifest::new("/", recs);
            let s = split(&m, TEST_FRACTION, seed).unwrap();
            let mut strata: BTreeMap<(usize, Mode, Option<i32>), (usize, usize)> = BTreeMap::new();
            for r in &m.records {
                strata.entry((r.label, r.mode, r.snr_db)).or_default().0 += 1;
            }
            for r in &s.test.records {
                strata.get_mut(&(r.label, r.mode, r.snr_db)).unwrap().1 += 1;
            }
            for (total, test) in strata.values() {
                prop_assert!((*test as f64 - *total as f64 * 0.4).abs() <= 1.0);
            }
            prop_assert_eq!(s.train.len() + s.test.len(), m.len());
        }

        #[test]
        fn manifest_round_trip(labels in proptest::collection::vec((0usize..11, 0usize..5, 0usize..5), 0..30)) {
            let recs: Vec<_> = labels.iter().enumerate().map(|(i, &(l, n, s))| {
                if n == 0 {
                    UtteranceRecord::clean(format!("d/{i}.wav"), l)
                } else {
                    UtteranceRecord::noisy(format!("d/{i}.wav"), l, NoiseType::SCENARIOS[n - 1], ALL_SNRS[s])
                }
            }).collect();
            let m = Manifest::new("/r", recs);
            let back = Manifest::parse(&m.to_csv().unwrap(), PathBuf::from("/r")).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
