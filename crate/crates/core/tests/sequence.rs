//! Joint sequence contract, masked-position isolation and ablation
//! equivalence.

use kramt_core::model::{segments, Ablation, JointInputs, Kramt, ModelConfig, Segment};
use kramt_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = rng.gen_range(1..=3);
    ModelConfig {
        d: heads * rng.gen_range(2..=4),
        layers: rng.gen_range(1..=2),
        heads,
        query_len: rng.gen_range(1..=6),
        knowledge_len: rng.gen_range(1..=6),
        regions: rng.gen_range(1..=5),
        mlp_hidden: rng.gen_range(2..=8),
        vocab_size: 12,
        text_layers: 1,
        appearance_dim: 3,
        ln_eps: 1e-5,
    }
}

struct Inputs {
    query: Tensor,
    query_mask: Vec<bool>,
    knowledge: Tensor,
    knowledge_mask: Vec<bool>,
    regions: Tensor,
    region_mask: Vec<bool>,
}

fn random_inputs(c: &ModelConfig, rng: &mut ChaCha8Rng) -> Inputs {
    let mask = |n: usize, rng: &mut ChaCha8Rng| -> Vec<bool> {
        let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        m[0] = true;
        m
    };
    Inputs {
        query: Tensor::randn(&[c.query_len, c.d], 1.0, rng),
        query_mask: mask(c.query_len, rng),
        knowledge: Tensor::randn(&[c.knowledge_len, c.d], 1.0, rng),
        knowledge_mask: mask(c.knowledge_len, rng),
        regions: Tensor::randn(&[c.regions, c.d], 1.0, rng),
        region_mask: mask(c.regions, rng),
    }
}

/// Hidden states and logit of one example.
fn run(model: &Kramt, x: &Inputs, with_knowledge: bool, ablation: Ablation) -> (Vec<f64>, f64, Vec<bool>) {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let q = g.leaf(&x.query);
    let k = g.leaf(&x.knowledge);
    let r = g.leaf(&x.regions);
    let pairs = [(0, with_knowledge.then_some(0), 0)];
    let inputs = JointInputs {
        query: q,
        query_mask: &x.query_mask,
        knowledge: with_knowledge.then_some(k),
        knowledge_mask: &x.knowledge_mask,
        regions: r,
        region_mask: &x.region_mask,
        pairs: &pairs,
    };
    let out = model.encode_joint(&mut g, &p, &inputs, ablation).unwrap();
    (g.value(out.hidden).to_vec(), g.value(out.logits)[0], out.mask)
}

#[test]
fn joint_length_is_l_plus_m_plus_n_plus_3_for_50_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..50 {
        let c = random_config(&mut rng);
        let model = Kramt::new(c.clone(), rng.gen()).unwrap();
        let x = random_inputs(&c, &mut rng);
        let (hidden, _, mask) = run(&model, &x, true, Ablation::default());
        let s = c.query_len + c.knowledge_len + c.regions + 3;
        assert_eq!(c.seq_len(), s);
        assert_eq!(hidden.len(), s * c.d);
        assert_eq!(mask.len(), s);
        let seg = segments(c.query_len, c.knowledge_len, c.regions);
        assert_eq!(seg.len(), s);
        assert_eq!(seg[0], Segment::Cls);
        assert_eq!(seg[c.query_len + 1], Segment::Sep);
        assert_eq!(seg[c.query_len + c.knowledge_len + 2], Segment::Sep);
        assert_eq!(seg.iter().filter(|&&x| x == Segment::Region).count(), c.regions);
    }
}

#[test]
fn masked_positions_do_not_influence_visible_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let c = random_config(&mut rng);
        let model = Kramt::new(c.clone(), rng.gen()).unwrap();
        let x = random_inputs(&c, &mut rng);
        let (hidden, logit, mask) = run(&model, &x, true, Ablation::default());
        let mut y = random_inputs(&c, &mut rng);
        // Same visible content, fresh values everywhere the mask is off.
        let keep = |a: &Tensor, b: &mut Tensor, m: &[bool]| {
            for (i, &v) in m.iter().enumerate() {
                if v {
                    b.data_mut()[i * c.d..(i + 1) * c.d].copy_from_slice(&a.data()[i * c.d..(i + 1) * c.d]);
                }
            }
        };
        y.query_mask.clone_from(&x.query_mask);
        y.knowledge_mask.clone_from(&x.knowledge_mask);
        y.region_mask.clone_from(&x.region_mask);
        keep(&x.query, &mut y.query, &x.query_mask);
        keep(&x.knowledge, &mut y.knowledge, &x.knowledge_mask);
        keep(&x.regions, &mut y.regions, &x.region_mask);
        let (hidden2, logit2, _) = run(&model, &y, true, Ablation::default());
        assert!((logit - logit2).abs() < 1e-6, "{logit} vs {logit2}");
        for (pos, &visible) in mask.iter().enumerate() {
            if visible {
                for j in 0..c.d {
                    let (a, b) = (hidden[pos * c.d + j], hidden2[pos * c.d + j]);
                    assert!((a - b).abs() < 1e-6, "position {pos}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn masking_knowledge_equals_omitting_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let c = random_config(&mut rng);
        let model = Kramt::new(c.clone(), rng.gen()).unwrap();
        let x = random_inputs(&c, &mut rng);
        let ablate = Ablation {
            no_knowledge: true,
            no_vision: false,
        };
        let (_, masked, _) = run(&model, &x, true, ablate);
        let (_, absent, _) = run(&model, &x, false, Ablation::default());
        assert!((masked - absent).abs() < 1e-6, "{masked} vs {absent}");
    }
}

#[test]
fn ablated_knowledge_receives_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = random_config(&mut rng);
    let model = Kramt::new(c.clone(), 1).unwrap();
    let x = random_inputs(&c, &mut rng);
    for (ablation, expect_zero) in [
        (Ablation { no_knowledge: true, no_vision: false }, true),
        (Ablation::default(), false),
    ] {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let q = g.leaf(&x.query);
        let k = g.param(&x.knowledge);
        let r = g.leaf(&x.regions);
        let pairs = [(0, Some(0), 0)];
        let inputs = JointInputs {
            query: q,
            query_mask: &x.query_mask,
            knowledge: Some(k),
            knowledge_mask: &x.knowledge_mask,
            regions: r,
            region_mask: &x.region_mask,
            pairs: &pairs,
        };
        let out = model.encode_joint(&mut g, &p, &inputs, ablation).unwrap();
        let loss = g.sum(out.logits);
        let grads = g.backward(loss).unwrap();
        let gk = grads.get(k).map(<[f64]>::to_vec).unwrap_or_default();
        let norm: f64 = gk.iter().map(|v| v * v).sum();
        if expect_zero {
            assert_eq!(norm, 0.0);
        } else {
            assert!(norm > 0.0);
        }
    }
}
