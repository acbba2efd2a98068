//! Manual diagnostics for calibrating the synthetic training setup.
//! Run explicitly: `cargo test -p mmvqa --test diag -- --ignored --nocapture`

use std::collections::BTreeMap;
use std::path::Path;

use mmvqa::checkpoint::Checkpoint;
use mmvqa::data::load_caption_corpus;
use mmvqa::train::{parallel_map, worker_threads};
use mmvqa_core::model::{
    argmax, assemble_sequence, bind_network, encoder_forward, mlm_logits, Phase,
};
use mmvqa_core::tokenizer::{tokenize_with_keywords, Vocab, MASK_ID};
use mmvqa_core::vision::{decode_ppm, encode_image, resize_bilinear};
use mmvqa_core::Tape;

#[test]
#[ignore]
fn per_slot_masked_accuracy() {
    let base = std::env::var("DIAG_DIR").unwrap_or_else(|_| "/tmp/synth".into());
    let ckpt_path = std::env::var("DIAG_CKPT").unwrap_or_else(|_| format!("{base}/pre.ckpt"));
    let vocab = Vocab::from_lines(
        &std::fs::read_to_string(format!("{base}/vocab.txt")).unwrap(),
    )
    .unwrap();
    let ckpt = Checkpoint::load(Path::new(&ckpt_path)).unwrap();
    let net = ckpt.to_network().unwrap();
    // held-out slice: reuse the tail of the pretraining corpus
    let (records, _) = load_caption_corpus(Path::new(&format!("{base}/data/pretrain.tsv"))).unwrap();
    let records = &records[records.len().saturating_sub(200)..];

    let stats = parallel_map(records, worker_threads(), |_, r| {
        let keywords: Vec<&str> = r.keywords.iter().map(String::as_str).collect();
        let seq = tokenize_with_keywords(&r.caption, &keywords, &vocab);
        // mask every keyword token
        let mut input = seq.ids.clone();
        let mut labels = vec![mmvqa_core::tape::IGNORE_INDEX; seq.ids.len()];
        for i in 0..seq.ids.len() {
            if seq.keyword[i] {
                labels[i] = seq.ids[i];
                input[i] = MASK_ID;
            }
        }
        let bytes = std::fs::read(&r.image).unwrap();
        let mut img = decode_ppm(&bytes).unwrap();
        if img.height() != net.cfg.image_size {
            img = resize_bilinear(&img, net.cfg.image_size, net.cfg.image_size).unwrap();
        }
        let mut tape = Tape::<f32>::new();
        let bound = bind_network(&mut tape, &net, false);
        let feats = encode_image(
            &mut tape,
            &bound.vision,
            &net.cfg.cnn(),
            net.cfg.feature_mode,
            &img,
        )
        .unwrap();
        let mseq = assemble_sequence(
            &mut tape,
            &bound,
            Some(&feats),
            &input,
            Some(&labels),
            &net.cfg,
            &mut Phase::Eval,
        )
        .unwrap();
        let out = encoder_forward(&mut tape, &bound, &mseq, &net.cfg, &mut Phase::Eval).unwrap();
        let positions = mseq.masked_positions();
        let logits = mlm_logits(&mut tape, &bound, &out, &positions, &mseq).unwrap();
        let lab = mseq.masked_labels();
        // slot identity from the keyword strings
        let slot_names = ["color", "shape", "plane"];
        let mut per_slot: Vec<(String, bool)> = Vec::new();
        for (row, &l) in lab.iter().enumerate() {
            let v = &tape.value(logits).data()
                [row * net.cfg.vocab_size..(row + 1) * net.cfg.vocab_size];
            let ok = argmax(v) == l;
            let slot = slot_names.get(row).unwrap_or(&"extra");
            per_slot.push((slot.to_string(), ok));
        }
        per_slot
    });

    let mut agg: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for sample in stats {
        for (slot, ok) in sample {
            let e = agg.entry(slot).or_insert((0, 0));
            e.0 += ok as usize;
            e.1 += 1;
        }
    }
    for (slot, (ok, n)) in agg {
        println!("{slot}: {:.4} ({ok}/{n})", ok as f64 / n as f64);
    }
}

#[test]
#[ignore]
fn plane_feature_probe() {
    use mmvqa_core::vision::{bind_cnn, encode_image};
    let base = std::env::var("DIAG_DIR").unwrap_or_else(|_| "/tmp/synth3".into());
    let ckpt_path = std::env::var("DIAG_CKPT").unwrap_or_else(|_| format!("{base}/pre8.ckpt"));
    let ckpt = Checkpoint::load(Path::new(&ckpt_path)).unwrap();
    let net = ckpt.to_network().unwrap();
    let (records, _) = load_caption_corpus(Path::new(&format!("{base}/data/pretrain.tsv"))).unwrap();
    let records = &records[..600.min(records.len())];
    let planes = ["axial", "coronal", "sagittal"];

    // feature extractors: raw downsampled luminance, trained tokens, random tokens
    use rand::SeedableRng as _;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1u64);
    let random_net = mmvqa_core::model::Network::init_mlm(net.cfg.clone(), &mut rng).unwrap();

    let feats: Vec<(usize, Vec<f32>, Vec<f32>, Vec<f32>)> = parallel_map(records, worker_threads(), |_, r| {
        let label = planes.iter().position(|p| r.keywords.contains(&p.to_string())).unwrap();
        let bytes = std::fs::read(&r.image).unwrap();
        let img = decode_ppm(&bytes).unwrap();
        // raw: 12x12 grayscale
        let small = resize_bilinear(&img, 12, 12).unwrap();
        let raw: Vec<f32> = (0..12 * 12)
            .map(|i| {
                let p = small.pixel(i / 12, i % 12);
                0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
            })
            .collect();
        let tokens_of = |n: &mmvqa_core::model::Network| -> Vec<f32> {
            let mut tape = Tape::<f32>::new();
            let bound = bind_network(&mut tape, n, false);
            let f = encode_image(&mut tape, &bound.vision, &n.cfg.cnn(), n.cfg.feature_mode, &img).unwrap();
            tape.value(f.tokens).data().to_vec()
        };
        let _ = bind_cnn::<f32>; // keep import used
        (label, raw, tokens_of(&net), tokens_of(&random_net))
    });

    let split = records.len() / 2;
    for (name, pick) in [
        ("raw12x12", 1usize),
        ("trained_tokens", 2),
        ("random_tokens", 3),
    ] {
        let get = |i: usize| -> (usize, &Vec<f32>) {
            let f = &feats[i];
            (f.0, match pick { 1 => &f.1, 2 => &f.2, _ => &f.3 })
        };
        let dim = get(0).1.len();
        let mut centroids = vec![vec![0.0f64; dim]; 3];
        let mut counts = [0usize; 3];
        for i in 0..split {
            let (l, v) = get(i);
            counts[l] += 1;
            for (c, x) in centroids[l].iter_mut().zip(v) {
                *c += *x as f64;
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            for x in c.iter_mut() {
                *x /= n.max(1) as f64;
            }
        }
        let mut ok = 0;
        for i in split..feats.len() {
            let (l, v) = get(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centroids.iter().enumerate() {
                let d: f64 = c.iter().zip(v).map(|(a, &b)| (a - b as f64).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            ok += (best == l) as usize;
        }
        println!("{name}: plane centroid accuracy {:.4}", ok as f64 / (feats.len() - split) as f64);
    }
}
