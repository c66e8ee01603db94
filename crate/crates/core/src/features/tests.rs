use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn params(speakers: usize, per_class: usize, sigma: f64, dims: usize) -> SynthParams {
    SynthParams {
        speakers,
        per_class,
        sigma,
        rows: dims,
        cols: dims,
        classes: 4,
    }
}

#[test]
fn pad_and_truncate() {
    let cfg = MfccConfig::default();
    let four = vec![0.5; 4 * 16384];
    let p = pad_or_truncate(&four, &cfg);
    assert_eq!(p.len(), 131072);
    assert!(p[65536..].iter().all(|&v| v == 0.0));
    assert!(p[..65536].iter().all(|&v| v == 0.5));
    let ten: Vec<f64> = (0..10 * 16384).map(|i| i as f64).collect();
    assert_eq!(pad_or_truncate(&ten, &cfg), ten[..131072].to_vec());
    let eight: Vec<f64> = (0..131072).map(|i| (i as f64).sin()).collect();
    assert_eq!(pad_or_truncate(&eight, &cfg), eight);
}

#[test]
fn shapes_follow_the_pipeline() {
    let cfg = MfccConfig::default();
    assert_eq!(cfg.frames(), 512);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Vec<f64> = (0..131072).map(|_| rng.random_range(-0.5..0.5)).collect();
    let m = mfcc(&x, &cfg).unwrap();
    assert_eq!(m.shape(), &[128, 512]);
    assert!(m.is_finite());
    let pooled = pool_downsample(&m, 4).unwrap();
    assert_eq!(pooled.shape(), &[128, 128]);
}

#[test]
fn mfcc_rejects_unpadded_input() {
    assert!(matches!(mfcc(&[0.0; 100], &MfccConfig::default()), Err(Error::Contract(_))));
}

#[test]
fn silence_concentrates_in_coefficient_zero() {
    let cfg = MfccConfig::default();
    let m = mfcc(&vec![0.0; 131072], &cfg).unwrap();
    let c0 = LOG_FLOOR.ln() * (128f64).sqrt();
    for t in 0..512 {
        assert!((m.data()[t] - c0).abs() < 1e-9);
        for k in 1..128 {
            assert!(m.data()[k * 512 + t].abs() < 1e-9);
        }
    }
}

#[test]
fn sine_at_band_centre_dominates_that_band() {
    let cfg = MfccConfig::default();
    let centres = mel_centers(&cfg);
    for band in [30usize, 64, 100, 120] {
        // Snap to an FFT bin so the oracle can evaluate the DFT there.
        let bin_hz = cfg.sample_rate as f64 / cfg.frame_length as f64;
        let bin = (centres[band] / bin_hz).round() as usize;
        let f = bin as f64 * bin_hz;
        let x: Vec<f64> = (0..131072).map(|i| (2.0 * PI * f * i as f64 / cfg.sample_rate as f64).sin()).collect();
        let logmel = log_mel_frames(&x, &cfg).unwrap();
        let frame = &logmel[10];
        let best = (0..128).fold(0, |b, i| if frame[i] > frame[b] { i } else { b });
        // Snapping can move the peak to the neighbouring band at most.
        assert!(best.abs_diff(band) <= 1, "band {band} vs {best}");

        let power = power_frames(&x, &cfg).unwrap();
        let n = cfg.frame_length;
        let (mut re, mut im) = (0.0, 0.0);
        for i in 0..n {
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
            let s = x[10 * cfg.hop + i] * w;
            re += s * (2.0 * PI * (bin * i) as f64 / n as f64).cos();
            im -= s * (2.0 * PI * (bin * i) as f64 / n as f64).sin();
        }
        let direct = re * re + im * im;
        assert!((power[10][bin] - direct).abs() < 1e-6 * direct);
    }
}

#[test]
fn mel_energy_bounded_by_spectral_energy() {
    let cfg = MfccConfig::default();
    let bank = mel_filterbank(&cfg);
    assert!(bank.iter().flatten().all(|&w| (0.0..=1.0).contains(&w)));
    assert!(bank.iter().all(|row| row.iter().any(|&w| w > 0.0)));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..131072).map(|_| rng.random_range(-1.0..1.0)).collect();
    for p in power_frames(&x, &cfg).unwrap().iter().step_by(37) {
        let mel: f64 = bank.iter().map(|w| w.iter().zip(p).map(|(a, b)| a * b).sum::<f64>()).sum();
        assert!(mel <= p.iter().sum::<f64>());
    }
}

#[test]
fn hop_delay_shifts_frames() {
    let cfg = MfccConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..131072).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut delayed = vec![0.0; 256];
    delayed.extend_from_slice(&x[..131072 - 256]);
    let a = mfcc(&x, &cfg).unwrap();
    let b = mfcc(&delayed, &cfg).unwrap();
    for t in 1..508 {
        for k in 0..128 {
            assert!((b.data()[k * 512 + t] - a.data()[k * 512 + t - 1]).abs() < 1e-8);
        }
    }
}

#[test]
fn dct_matches_direct_sum() {
    let x = [1.0, -2.0, 0.5, 3.0];
    let y = dct2_ortho(&x, 4);
    // Orthonormal: energy preserved.
    let ex: f64 = x.iter().map(|v| v * v).sum();
    let ey: f64 = y.iter().map(|v| v * v).sum();
    assert!((ex - ey).abs() < 1e-12);
    assert!((y[0] - 2.5 / 2.0).abs() < 1e-12);
}

#[test]
fn pooling_examples() {
    let c = Tensor::full(&[128, 512], 3.0);
    assert_eq!(pool_downsample(&c, 4).unwrap(), Tensor::full(&[128, 128], 3.0));
    let mut row = vec![0.0; 512];
    row[..4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
    let m = Tensor::new(vec![1, 512], row).unwrap();
    let p = pool_downsample(&m, 4).unwrap();
    assert_eq!(&p.data()[..2], &[4.0, 0.0]);
    assert!(matches!(pool_downsample(&Tensor::zeros(&[2, 6]), 4), Err(Error::Contract(_))));
}

#[test]
fn pooling_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..128 * 512).map(|_| rng.random_range(-5.0..5.0)).collect();
    let m = Tensor::new(vec![128, 512], data.clone()).unwrap();
    let p = pool_downsample(&m, 4).unwrap();
    for r in 0..128 {
        for c in 0..128 {
            let mut best = f64::NEG_INFINITY;
            for k in 0..4 {
                best = best.max(data[r * 512 + c * 4 + k]);
            }
            assert_eq!(p.data()[r * 128 + c], best);
        }
    }
    let max_in = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_out = p.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(max_in, max_out);
}

#[test]
fn noiseless_pairs_are_identical_and_classes_balanced() {
    let maps = synth_dataset(&params(5, 3, 0.0, 16), 4).unwrap();
    assert_eq!(maps.len(), 5 * 4 * 3);
    for w in maps.chunks(3) {
        assert!(w.iter().all(|m| m.values == w[0].values && m.label == w[0].label));
    }
    for s in 0..5 {
        let spk = format!("spk{s:02}");
        for k in 0..4 {
            assert_eq!(maps.iter().filter(|m| m.speaker == spk && m.label == k).count(), 3);
        }
    }
}

#[test]
fn centroid_oracle_separates_held_out_speakers() {
    let maps = synth_dataset(&params(8, 10, 0.1, 32), 11).unwrap();
    let held = ["spk06", "spk07"];
    let mut centroids = vec![vec![0.0; 32 * 32]; 4];
    let mut counts = [0usize; 4];
    for m in maps.iter().filter(|m| !held.contains(&m.speaker.as_str())) {
        counts[m.label] += 1;
        for (c, v) in centroids[m.label].iter_mut().zip(m.values.data()) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let test: Vec<&FeatureMap> = maps.iter().filter(|m| held.contains(&m.speaker.as_str())).collect();
    let correct = test
        .iter()
        .filter(|m| {
            let d = |c: &Vec<f64>| c.iter().zip(m.values.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..4).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))).unwrap();
            best == m.label
        })
        .count();
    assert!(correct as f64 / test.len() as f64 >= 0.95);
}

#[test]
fn batches_put_time_on_the_height_axis() {
    let m = FeatureMap {
        values: Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        label: 0,
        speaker: "a".into(),
    };
    let b = batch_tensor(&[&m, &m]).unwrap();
    assert_eq!(b.shape(), &[2, 1, 3, 2]);
    assert_eq!(&b.data()[..6], &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
}

fn write_wav(path: &Path, channels: u16, rate: u32, samples: &[i16]) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &s in samples {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn wav_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sine.wav");
    let amp = 16000.0;
    let samples: Vec<i16> = (0..16384)
        .map(|i| (amp * (2.0 * PI * 440.0 * i as f64 / 16384.0).sin()).round() as i16)
        .collect();
    write_wav(&path, 1, 16384, &samples);
    let (x, rate) = load_wav(&path, 16384).unwrap();
    assert_eq!(rate, 16384);
    assert_eq!(x.len(), 16384);
    let peak = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!((peak - amp / 32768.0).abs() < 1e-3);

    let stereo = dir.path().join("stereo.wav");
    write_wav(&stereo, 2, 16384, &[0; 200]);
    assert!(matches!(load_wav(&stereo, 16384), Err(Error::Ingestion(_))));

    let slow = dir.path().join("slow.wav");
    write_wav(&slow, 1, 8192, &samples[..8192]);
    let (y, _) = load_wav(&slow, 16384).unwrap();
    assert!(y.len().abs_diff(16384) <= 1);

    let garbage = dir.path().join("garbage.wav");
    std::fs::write(&garbage, b"RIFFnope").unwrap();
    assert!(matches!(load_wav(&garbage, 16384), Err(Error::Ingestion(_))));
}

#[test]
fn eight_second_wav_becomes_one_map() {
    let cfg = MfccConfig::default();
    let u = Utterance {
        samples: (0..8 * 16384).map(|i| (i as f64 * 0.01).sin() * 0.3).collect(),
        sample_rate: 16384,
        label: 2,
        speaker: "x".into(),
    };
    let f = utterance_features(&u, &cfg).unwrap();
    assert_eq!(f.values.shape(), &[128, 128]);
    assert_eq!(f.label, 2);
}

#[test]
fn edset_round_trip() {
    let maps = synth_dataset(&params(5, 2, 0.1, 8), 9).unwrap();
    let ds = Dataset {
        maps,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        seed: Some(9),
        generator: Some(serde_json::json!({"sigma": 0.1})),
    };
    let mut buf = Vec::new();
    ds.write_to(&mut buf).unwrap();
    let back = Dataset::read_from(buf.as_slice()).unwrap();
    assert_eq!(back, ds.clone().quantized());
    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    assert_eq!(buf, again);
    assert!(Dataset::read_from(&buf[..buf.len() - 3]).is_err());
    assert!(Dataset::read_from(&b"NOTEDSET"[..]).is_err());
}
