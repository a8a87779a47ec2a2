mod common;

use std::collections::BTreeMap;

use oabtg::aggregation::{cgru_step, vlad_encode_step, AssignmentMap, CGruParameters, ClusterCodebook, FeatureMap};
use oabtg::btg::{
    align_to_anchors, area_similarity, build_bidirectional_trajectories, iou_similarity, max_pair_distance,
    region_similarity, BoundingBox,
};
use oabtg::dataio::{random_video, tokenize, VideoDims};
use oabtg::decoder::{
    attend_features, attention_weights, decoder_step, temporal_attend, word_distribution, AttentionParameters,
    DecoderDims, DecoderParameters, DecoderState, VisualContext, Vocabulary, BOS,
};
use oabtg::inference::{beam_search, fuse_word_scores, sequence_log_prob, FusionMode};
use oabtg::metrics::bleu4;
use oabtg::model::{DirectionMode, Example, Model, ModelShape};
use oabtg::tensor::{argmax, Tensor};
use oabtg::training::clip_gradients;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{exhaustive_best, ToyScorer};

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.0..50.0f64, 0.0..50.0f64, 0.5..50.0f64, 0.5..50.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
}

fn dims(frames: usize, regions: usize) -> VideoDims {
    VideoDims {
        frames,
        regions,
        height: 2,
        width: 2,
        channels: 2,
        appearance: 3,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn box_terms_are_translation_invariant(a in bbox(), b in bbox(), dx in -20.0..20.0f64, dy in -20.0..20.0f64) {
        let (ta, tb) = (a.translated(dx, dy), b.translated(dx, dy));
        prop_assert!((iou_similarity(&a, &b) - iou_similarity(&ta, &tb)).abs() < 1e-9);
        prop_assert!((area_similarity(&a, &b) - area_similarity(&ta, &tb)).abs() < 1e-9);
    }

    #[test]
    fn region_similarity_is_symmetric(seed in any::<u64>()) {
        let v = random_video("v", dims(2, 3), &mut ChaCha8Rng::seed_from_u64(seed));
        let norm = max_pair_distance(&v.frames[0], &v.frames[1]);
        for a in &v.frames[0].regions {
            for b in &v.frames[1].regions {
                let ab = region_similarity(a, b, norm).unwrap();
                let ba = region_similarity(b, a, norm).unwrap();
                prop_assert_eq!(ab, ba);
                prop_assert!((0.0..=1.0).contains(&ab));
            }
        }
    }

    #[test]
    fn alignment_ignores_common_appearance_scale(seed in any::<u64>(), scale in 0.1..10.0f64) {
        let v = random_video("v", dims(2, 4), &mut ChaCha8Rng::seed_from_u64(seed));
        let mut scaled = v.clone();
        for f in &mut scaled.frames {
            for r in &mut f.regions {
                r.appearance.iter_mut().for_each(|x| *x *= scale);
            }
        }
        prop_assert_eq!(
            align_to_anchors(&v.frames[0], &v.frames[1]).unwrap(),
            align_to_anchors(&scaled.frames[0], &scaled.frames[1]).unwrap()
        );
    }

    #[test]
    fn reversing_video_swaps_directions(seed in any::<u64>(), t in 1usize..5, n in 1usize..4) {
        let v = random_video("v", dims(t, n), &mut ChaCha8Rng::seed_from_u64(seed));
        let fwd = build_bidirectional_trajectories(&v).unwrap();
        let rev = build_bidirectional_trajectories(&v.reversed()).unwrap();
        prop_assert_eq!(fwd.forward.len(), n);
        prop_assert_eq!(fwd.backward.len(), n);
        for (a, b) in rev.forward.iter().zip(&fwd.backward) {
            // Frame t of the reversed video is frame T-1-t of the original.
            let mut ra: Vec<(usize, usize)> = a.steps.iter().map(|s| (t - 1 - s.frame, s.region)).collect();
            let mut rb: Vec<(usize, usize)> = b.steps.iter().map(|s| (s.frame, s.region)).collect();
            ra.sort();
            rb.sort();
            prop_assert_eq!(ra, rb);
        }
        prop_assert_eq!(&fwd, &build_bidirectional_trajectories(&v).unwrap());
    }

    #[test]
    fn trajectories_are_well_formed(seed in any::<u64>(), t in 1usize..6, n in 1usize..5) {
        let v = random_video("v", dims(t, n), &mut ChaCha8Rng::seed_from_u64(seed));
        let set = build_bidirectional_trajectories(&v).unwrap();
        for (i, tr) in set.forward.iter().enumerate() {
            prop_assert_eq!(tr.steps.len(), t);
            prop_assert_eq!(tr.steps[0].frame, 0);
            prop_assert_eq!(tr.steps[0].region, i);
        }
        for (i, tr) in set.backward.iter().enumerate() {
            prop_assert_eq!(tr.steps[0].frame, t - 1);
            prop_assert_eq!(tr.steps[0].region, i);
            prop_assert!(tr.steps.windows(2).all(|w| w[0].frame == w[1].frame + 1));
        }
        let mut rev = set.frame_backward.clone();
        rev.reverse();
        prop_assert_eq!(rev, set.frame_forward.clone());
    }

    #[test]
    fn vlad_translation_and_linearity(seed in any::<u64>(), alpha in -2.0..2.0f64, beta in -2.0..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, d, k) = (2, 3, 3, 2);
        let xv = Tensor::uniform(&[h * w * d], 1.0, &mut rng).data;
        let x = FeatureMap::new(h, w, d, xv.clone()).unwrap();
        let codebook = ClusterCodebook::random(k, d, &mut rng);
        let amap = |v: Vec<f64>| AssignmentMap { height: h, width: w, clusters: k, values: v };
        let a1 = Tensor::uniform(&[h * w * k], 1.0, &mut rng).data;
        let a2 = Tensor::uniform(&[h * w * k], 1.0, &mut rng).data;
        let v1 = vlad_encode_step(&x, &amap(a1.clone()), &codebook).unwrap();
        let v2 = vlad_encode_step(&x, &amap(a2.clone()), &codebook).unwrap();
        let mix: Vec<f64> = a1.iter().zip(&a2).map(|(p, q)| alpha * p + beta * q).collect();
        let vm = vlad_encode_step(&x, &amap(mix), &codebook).unwrap();
        for i in 0..vm.len() {
            prop_assert!((vm[i] - (alpha * v1[i] + beta * v2[i])).abs() < 1e-9);
        }

        let delta = Tensor::uniform(&[d], 3.0, &mut rng).data;
        let shifted_x: Vec<f64> = xv.iter().enumerate().map(|(i, v)| v + delta[i % d]).collect();
        let mut shifted_c = codebook.clone();
        for (i, c) in shifted_c.centers.data.iter_mut().enumerate() {
            *c += delta[i % d];
        }
        let vt = vlad_encode_step(&FeatureMap::new(h, w, d, shifted_x).unwrap(), &amap(a1), &shifted_c).unwrap();
        for (a, b) in vt.iter().zip(&v1) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cgru_state_stays_in_open_unit_interval(seed in any::<u64>(), steps in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = CGruParameters::random(3, 4, 3, &mut rng);
        let mut a = AssignmentMap::zeros(2, 2, 4);
        for _ in 0..steps {
            let x = FeatureMap::new(2, 2, 3, Tensor::uniform(&[12], 5.0, &mut rng).data).unwrap();
            let next = cgru_step(&params, &x, &a).unwrap();
            prop_assert!(next.values.iter().all(|v| v.abs() < 1.0));
            a = next;
        }
    }

    #[test]
    fn attention_is_a_convex_combination(seed in any::<u64>(), m in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttentionParameters::random(4, 3, 5, &mut rng);
        let h = Tensor::uniform(&[3], 1.0, &mut rng).data;
        let feats: Vec<Vec<f64>> = (0..m).map(|_| Tensor::uniform(&[5], 4.0, &mut rng).data).collect();
        let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        let weights = attention_weights(&params, &h, &refs).unwrap();
        prop_assert!(weights.iter().all(|&w| w >= 0.0));
        prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let out = temporal_attend(&params, &h, &refs).unwrap();
        for d in 0..5 {
            let lo = feats.iter().map(|f| f[d]).fold(f64::INFINITY, f64::min);
            let hi = feats.iter().map(|f| f[d]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[d] >= lo - 1e-12 && out[d] <= hi + 1e-12);
        }
    }

    #[test]
    fn object_permutation_permutes_weights_only(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = DecoderParameters::random(small_dims(), &mut rng);
        let objects: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| (0..2).map(|_| Tensor::uniform(&[4], 1.0, &mut rng).data).collect())
            .collect();
        let frames: Vec<Vec<f64>> = (0..2).map(|_| Tensor::uniform(&[4], 1.0, &mut rng).data).collect();
        let h = Tensor::uniform(&[3], 0.9, &mut rng).data;
        let perm = [2, 0, 1];
        let permuted: Vec<Vec<Vec<f64>>> = perm.iter().map(|&i| objects[i].clone()).collect();
        let a = attend_features(&params, &VisualContext::new(&params, objects, frames.clone()).unwrap(), &h);
        let b = attend_features(&params, &VisualContext::new(&params, permuted, frames).unwrap(), &h);
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((b.object_weights[j] - a.object_weights[i]).abs() < 1e-12);
        }
        for (x, y) in a.object.iter().zip(&b.object) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert_eq!(a.frame, b.frame);
    }

    #[test]
    fn decoder_state_stays_bounded(seed in any::<u64>(), steps in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = DecoderParameters::random(small_dims(), &mut rng);
        let mut state = DecoderState::initial(3);
        for _ in 0..steps {
            let phi_f = Tensor::uniform(&[4], 3.0, &mut rng).data;
            let phi_o = Tensor::uniform(&[4], 3.0, &mut rng).data;
            let (next, logits) = decoder_step(&params, &state, &phi_f, &phi_o, BOS).unwrap();
            prop_assert!(next.h.iter().all(|v| v.abs() < 1.0));
            prop_assert_eq!(argmax(&logits), argmax(&word_distribution(&logits)));
            state = next;
        }
    }

    #[test]
    fn clipping_is_idempotent(g in proptest::collection::vec(-100.0..100.0f64, 0..20), limit in 0.1..20.0f64) {
        let mut once = g.clone();
        clip_gradients(&mut once, limit);
        let mut twice = once.clone();
        clip_gradients(&mut twice, limit);
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn tokenize_is_idempotent(s in "[A-Za-z ,.!?'-]{0,40}") {
        let once = tokenize(&s);
        prop_assert_eq!(tokenize(&once.join(" ")), once);
    }

    #[test]
    fn vocabulary_round_trips(words in proptest::collection::vec("[a-z]{1,6}", 1..10)) {
        let vocab = Vocabulary::new(words.iter().map(String::as_str));
        for w in &words {
            prop_assert_eq!(vocab.decode(vocab.encode(w)), Some(w.as_str()));
        }
    }

    #[test]
    fn fusion_is_commutative(p in proptest::collection::vec(0.01..1.0f64, 2..6), seed in any::<u64>()) {
        let z: f64 = p.iter().sum();
        let p: Vec<f64> = p.iter().map(|v| v / z).collect();
        let mut q = p.clone();
        q.rotate_left((seed % p.len() as u64) as usize);
        for mode in [FusionMode::Mean, FusionMode::Geometric] {
            prop_assert_eq!(fuse_word_scores(&p, &q, mode).unwrap(), fuse_word_scores(&q, &p, mode).unwrap());
            let f = fuse_word_scores(&p, &q, mode).unwrap();
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_beam_dominates_narrow_beams(seed in any::<u64>()) {
        let toy = ToyScorer { seed, vocab: 5 };
        let full = beam_search(&toy, 27, 3).unwrap();
        let (best, score) = exhaustive_best(&toy, 3);
        prop_assert_eq!(&full.tokens, &best);
        prop_assert_eq!(full.score, score);
        for width in 1..6 {
            let r = beam_search(&toy, width, 3).unwrap();
            prop_assert!(r.score <= full.score);
            let offline = sequence_log_prob(&toy, &r.tokens).unwrap();
            prop_assert!((offline - r.score).abs() < 1e-9);
            let summed: f64 = r.step_log_probs.iter().sum();
            prop_assert!((summed - r.score).abs() < 1e-9);
        }
    }

    #[test]
    fn bleu_ignores_video_order_and_extra_references(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = ["a", "b", "c", "d", "e"];
        let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
            use rand::Rng;
            (0..rng.gen_range(3..8)).map(|_| words[rng.gen_range(0..5)].to_string()).collect()
        };
        let mut cands = BTreeMap::new();
        let mut refs = BTreeMap::new();
        for v in 0..4 {
            cands.insert(format!("v{v}"), sentence(&mut rng));
            refs.insert(format!("v{v}"), vec![sentence(&mut rng)]);
        }
        let base = bleu4(&cands, &refs).unwrap();
        let renamed_c: BTreeMap<String, Vec<String>> = cands.iter().map(|(k, v)| (format!("z{k}"), v.clone())).rev().collect();
        let renamed_r: BTreeMap<String, Vec<Vec<String>>> = refs.iter().map(|(k, v)| (format!("z{k}"), v.clone())).collect();
        prop_assert_eq!(bleu4(&renamed_c, &renamed_r).unwrap().bleu4, base.bleu4);
        let mut more = refs.clone();
        more.get_mut("v0").unwrap().push(sentence(&mut rng));
        let extended = bleu4(&cands, &more).unwrap();
        for n in 0..4 {
            prop_assert!(extended.corpus.matches[n] >= base.corpus.matches[n]);
        }
        prop_assert!((0.0..=1.0).contains(&base.bleu4));
    }
}

fn small_dims() -> DecoderDims {
    DecoderDims {
        vocab: 6,
        embed: 3,
        hidden: 3,
        attention: 2,
        frame_feature: 4,
        object_feature: 4,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn loss_ignores_batch_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = ModelShape {
            clusters: 2,
            kernel_size: 3,
            hidden: 4,
            embed: 3,
            attention: 3,
            vocab: 7,
            channels: 2,
            assignment: Default::default(),
            directions: DirectionMode::Both,
            share_aggregation: false,
        };
        let model = Model::new(shape, &mut rng);
        let videos: Vec<_> = (0..3).map(|i| random_video(&format!("v{i}"), dims(2, 2), &mut rng)).collect();
        let sets: Vec<_> = videos.iter().map(|v| build_bidirectional_trajectories(v).unwrap()).collect();
        let tokens = [vec![1, 4, 5, 2, 0], vec![1, 6, 2, 0, 0], vec![1, 4, 4, 6, 2]];
        let masks = [vec![true, true, true, false], vec![true, true, false, false], vec![true; 4]];
        let batch: Vec<Example> = (0..3)
            .map(|i| Example { video: &videos[i], trajectories: &sets[i], tokens: &tokens[i], mask: &masks[i] })
            .collect();
        let reordered: Vec<Example> = [2, 0, 1]
            .iter()
            .map(|&i| Example { video: &videos[i], trajectories: &sets[i], tokens: &tokens[i], mask: &masks[i] })
            .collect();
        let a = model.loss(&batch, 5).unwrap();
        let b = model.loss(&reordered, 5).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}
