//! Brute-force checks of the synthetic generator's distortion band. The oracle
//! here reimplements fusion and contrast directly over the stored f32 rows.

use valid_core::decode::{decode_question, DecodeMode, ValidConfig};
use valid_core::fusion::preset;
use valid_core::synth::{synth_trace, SynthSpec};
use valid_core::trace::Trace;

const BUCKET: [u16; 7] = [13, 15, 17, 19, 21, 23, 25];

fn probs(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = row.iter().map(|&x| (x as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn first_max(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Default config: alpha 1, beta 0.1, whole bucket, probability space.
fn oracle_first_token(t: &Trace) -> (usize, usize) {
    let row = |l: u16| {
        let i = t.header.layer_ids.iter().position(|&x| x == l).unwrap();
        probs(&t.steps[0].per_layer[i])
    };
    let p_ori = row(t.header.standard_layer);
    let layers: Vec<Vec<f64>> = BUCKET.iter().map(|&l| row(l)).collect();
    let h: Vec<f64> = layers
        .iter()
        .map(|p| -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>())
        .collect();
    let z: f64 = h.iter().map(|x| x.exp()).sum();
    let v = p_ori.len();
    let mut p_ref = vec![0.0; v];
    for (p, hi) in layers.iter().zip(&h) {
        for j in 0..v {
            p_ref[j] += hi.exp() / z * p[j];
        }
    }
    let cut = 0.1 * p_ori.iter().cloned().fold(0.0, f64::max);
    let mut score = vec![0.0; v];
    for j in 0..v {
        if p_ori[j] >= cut {
            score[j] = (2.0 * p_ori[j] - p_ref[j]).max(0.0);
        }
    }
    (first_max(&p_ori), first_max(&score))
}

fn engine(t: &Trace, mode: DecodeMode) -> usize {
    let cfg = ValidConfig::new(preset("llava-v1.5").unwrap(), mode);
    decode_question(t, &cfg).unwrap().emitted_tokens[0] as usize
}

fn spec(d: f64, share: (f64, f64)) -> SynthSpec {
    let mut s = SynthSpec::llava_like("flip", 0, 1);
    s.distortion = d;
    s.profile.distorted_wrong_share = share;
    s
}

#[test]
fn full_distortion_flips_back() {
    for seed in 0..50 {
        let t = synth_trace(&spec(1.0, (0.95, 0.98)), seed).unwrap();
        let (vanilla, valid) = oracle_first_token(&t);
        assert_eq!((vanilla, valid), (1, 0), "seed {seed}");
        assert_eq!(engine(&t, DecodeMode::Vanilla), 1);
        assert_eq!(engine(&t, DecodeMode::Valid), 0);
    }
}

#[test]
fn below_the_band_vanilla_is_already_right() {
    for d in [0.0, 0.25, 0.5, 0.55] {
        for seed in 0..20 {
            let t = synth_trace(&spec(d, (0.55, 0.98)), seed).unwrap();
            assert_eq!(oracle_first_token(&t), (0, 0), "d {d} seed {seed}");
            assert_eq!(engine(&t, DecodeMode::Vanilla), 0);
            assert_eq!(t.steps[0].chosen_token, 0);
        }
    }
}

#[test]
fn inside_the_band_valid_recovers() {
    for d in [0.58, 0.6, 0.7, 0.8, 0.9, 1.0] {
        for seed in 0..20 {
            let t = synth_trace(&spec(d, (0.9, 0.98)), seed).unwrap();
            assert_eq!(oracle_first_token(&t), (1, 0), "d {d} seed {seed}");
            assert_eq!(engine(&t, DecodeMode::Valid), 0);
        }
    }
    // default share range: reliable at the lower edge
    for seed in 0..50 {
        let t = synth_trace(&spec(0.6, (0.55, 0.98)), seed).unwrap();
        assert_eq!(oracle_first_token(&t), (1, 0), "seed {seed}");
    }
}

#[test]
fn engine_agrees_with_oracle_across_shares() {
    for (i, d) in [0.6, 0.75, 0.9, 1.0].into_iter().enumerate() {
        for seed in 0..25 {
            let t = synth_trace(&spec(d, (0.55, 0.98)), seed * 10 + i as u64).unwrap();
            let (vanilla, valid) = oracle_first_token(&t);
            assert_eq!(engine(&t, DecodeMode::Vanilla), vanilla);
            assert_eq!(engine(&t, DecodeMode::Valid), valid);
        }
    }
}
