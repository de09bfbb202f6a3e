mod common;

use std::path::PathBuf;

use editprobe::backbone::{Backbone, BackboneConfig, EditSample, ForwardOptions, Segment};
use editprobe::image::Image;
use editprobe::numerics::{Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn small_config() -> BackboneConfig {
    BackboneConfig {
        image_size: 16,
        patch: 8,
        d_vision: 16,
        d_model: 32,
        heads: 2,
        encoder_depth: 1,
        depth: 3,
        ..BackboneConfig::default()
    }
}

fn noise_image(seed: u64, size: usize) -> Image {
    let mut r = common::rng(seed);
    Image::new(size, size, (0..size * size * 3).map(|_| r.random_range(0.0f32..1.0)).collect()).unwrap()
}

fn fixed_sample() -> EditSample {
    EditSample {
        source: noise_image(1, 16),
        edited: noise_image(2, 16),
        instruction: "make the sky purple".into(),
    }
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Snapshot {
    /// SHA-256 over the little-endian f32 bits of each full layer.
    layer_sha256: Vec<String>,
    /// Raw f32 bits of the last source/edited visual rows per layer.
    h_source_bits: Vec<Vec<u32>>,
    h_edited_bits: Vec<Vec<u32>>,
}

fn snapshot(backbone: &Backbone, sample: &EditSample) -> Snapshot {
    let hidden = backbone.forward_all_layers(sample, None).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<u32>>();
    let mut snap = Snapshot {
        layer_sha256: Vec::new(),
        h_source_bits: Vec::new(),
        h_edited_bits: Vec::new(),
    };
    for l in 1..=hidden.num_layers() {
        let mut h = Sha256::new();
        for v in hidden.layer(l).data() {
            h.update(v.to_le_bytes());
        }
        snap.layer_sha256.push(hex::encode(h.finalize()));
        snap.h_source_bits.push(bits(hidden.h_source(l)));
        snap.h_edited_bits.push(bits(hidden.h_edited(l)));
    }
    snap
}

/// Set `EDITPROBE_BLESS=1` to regenerate the file after an intended change.
#[test]
fn hidden_states_match_golden_snapshot() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/backbone_small.json");
    let got = snapshot(&Backbone::new(small_config()).unwrap(), &fixed_sample());
    if std::env::var_os("EDITPROBE_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap()).unwrap();
    }
    let expected: Snapshot = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(got, expected);
}

#[test]
fn fresh_backbones_are_identical() {
    let (a, b) = (Backbone::new(small_config()).unwrap(), Backbone::new(small_config()).unwrap());
    for (name, t) in a.params().iter() {
        assert_eq!(t.data(), b.params().get(name).unwrap().data(), "{name}");
        assert!(!a.params().is_trainable(name));
    }
    let s = fixed_sample();
    assert_eq!(snapshot(&a, &s), snapshot(&b, &s));
    let other = Backbone::new(BackboneConfig { seed: 7, ..small_config() }).unwrap();
    assert_ne!(snapshot(&a, &s), snapshot(&other, &s));
}

#[test]
fn sequence_layout_and_shapes() {
    let cfg = small_config();
    let backbone = Backbone::new(cfg).unwrap();
    let sample = fixed_sample();
    let hidden = backbone.forward_all_layers(&sample, None).unwrap();
    let n_img = cfg.patches_per_image();
    let n_txt = sample.instruction.len();
    assert_eq!(hidden.num_layers(), cfg.depth);
    for l in 1..=cfg.depth {
        assert_eq!(hidden.layer(l).shape(), &[2 * n_img + n_txt, cfg.d_model]);
    }
    let layout = &hidden.layout;
    assert_eq!((layout.last_source, layout.last_edited), (n_img - 1, 2 * n_img - 1));
    assert_eq!(layout.segments[layout.last_source], Segment::SourceVisual);
    assert_eq!(layout.segments[layout.last_source + 1], Segment::EditedVisual);
    assert_eq!(layout.segments[layout.last_edited], Segment::EditedVisual);
    assert_eq!(layout.segments[layout.last_edited + 1], Segment::Text);
    assert!(!layout.truncated);
}

#[test]
fn partial_forward_is_a_prefix_of_the_full_one() {
    let backbone = Backbone::new(small_config()).unwrap();
    let sample = fixed_sample();
    let full = backbone.forward_all_layers(&sample, None).unwrap();
    let mut tape = Tape::new();
    let trace = backbone
        .forward_on_tape(&mut tape, &sample, &mut ForwardOptions { up_to_layer: Some(2), ..Default::default() })
        .unwrap();
    assert_eq!(trace.layers.len(), 2);
    for l in 1..=2 {
        assert_eq!(tape.value(trace.layers[l - 1]).data(), full.layer(l).data());
    }
    for bad in [0, 4] {
        let mut tape = Tape::new();
        let r = backbone.forward_on_tape(&mut tape, &sample, &mut ForwardOptions { up_to_layer: Some(bad), ..Default::default() });
        assert!(matches!(r, Err(editprobe::Error::Config(_))));
    }
}

#[test]
fn swapping_images_permutes_the_visual_token_blocks() {
    let backbone = Backbone::new(small_config()).unwrap();
    let (a, b) = (noise_image(3, 16), noise_image(4, 16));
    let n = backbone.config().patches_per_image();
    let project = |s: &Image, e: &Image| -> Tensor {
        let mut tape = Tape::new();
        let (vs, ve) = backbone.encode_images(&mut tape, s, e, &mut ForwardOptions::default()).unwrap();
        let t = backbone.project(&mut tape, vs, ve).unwrap();
        tape.value(t).clone()
    };
    let (ab, ba) = (project(&a, &b), project(&b, &a));
    assert_eq!(ab.shape(), &[2 * n, backbone.config().d_model]);
    for i in 0..n {
        assert_eq!(ab.row(i), ba.row(n + i));
        assert_eq!(ab.row(n + i), ba.row(i));
    }
}

#[test]
fn instruction_order_does_not_reach_the_visual_embeddings() {
    let backbone = Backbone::new(small_config()).unwrap();
    let base = fixed_sample();
    let reordered = EditSample { instruction: "purple sky the make".into(), ..base.clone() };
    let visual_and_first_layer = |s: &EditSample| {
        let mut tape = Tape::new();
        let mut opts = ForwardOptions::default();
        let (vs, ve) = backbone.encode_images(&mut tape, &s.source, &s.edited, &mut opts).unwrap();
        let tv = backbone.project(&mut tape, vs, ve).unwrap();
        let visual = tape.value(tv).clone();
        let hidden = backbone.forward_all_layers(s, None).unwrap();
        (visual, hidden.layer(1).clone(), hidden.layout.last_edited + 1)
    };
    let (v1, h1, text_start) = visual_and_first_layer(&base);
    let (v2, h2, _) = visual_and_first_layer(&reordered);
    assert_eq!(v1.data(), v2.data());
    assert_ne!(h1.row(text_start), h2.row(text_start));
}

#[test]
fn long_instructions_are_truncated_and_flagged() {
    let backbone = Backbone::new(small_config()).unwrap();
    let max = backbone.config().max_text;
    let sample = EditSample { instruction: "x".repeat(max + 5), ..fixed_sample() };
    let hidden = backbone.forward_all_layers(&sample, None).unwrap();
    assert!(hidden.layout.truncated);
    assert_eq!(hidden.layer(1).rows(), 2 * backbone.config().patches_per_image() + max);
    let empty = EditSample { instruction: String::new(), ..fixed_sample() };
    assert!(matches!(backbone.forward_all_layers(&empty, None), Err(editprobe::Error::Data(_))));
}

#[test]
fn mismatched_image_sizes_are_rejected() {
    let backbone = Backbone::new(small_config()).unwrap();
    let sample = EditSample { edited: noise_image(2, 8), ..fixed_sample() };
    assert!(backbone.forward_all_layers(&sample, None).is_err());
}
