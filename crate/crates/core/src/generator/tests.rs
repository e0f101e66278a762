use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad, NumericArray, ParamNodes, ParameterVector, Tape};

fn small(v: usize, d: usize) -> Generator {
    Generator::new(
        v,
        d,
        ModelConfig {
            hidden: 4,
            embed: 3,
            dropout: 0.25,
        },
    )
    .unwrap()
}

fn random_params(g: &Generator, rng: &mut ChaCha8Rng, scale: f64) -> ParameterVector {
    let data = (0..g.layout().len()).map(|_| rng.gen_range(-scale..scale)).collect();
    ParameterVector::from_vec(g.layout().clone(), data).unwrap()
}

fn random_seq(rng: &mut ChaCha8Rng, v: usize, d: usize, len: usize) -> Sequence {
    let mut da: Vec<f64> = (0..d).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    da[0] = 1.0;
    Sequence {
        da,
        ids: (0..len).map(|_| rng.gen_range(0..v)).collect(),
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The cell written out with explicit loops over row-major segments.
/// Returns per-step log-probabilities of each target and the DA trace.
fn loop_oracle(g: &Generator, p: &ParameterVector, seq: &Sequence) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (v, dd, h, e) = (g.vocab_size(), g.da_dim(), g.hidden(), g.config().embed);
    let s = |n: &str| p.segment(n).unwrap();
    let (emb, wx, wh, bg, wrx, wrh, br, wd, wo, bo) = (
        s("embed"),
        s("w_x"),
        s("w_h"),
        s("b_gates"),
        s("w_rx"),
        s("w_rh"),
        s("b_r"),
        s("w_d"),
        s("w_out"),
        s("b_out"),
    );
    let mut hs = vec![0.0; h];
    let mut cs = vec![0.0; h];
    let mut da = seq.da.clone();
    let mut logps = Vec::new();
    let mut trace = vec![da.clone()];
    for t in 0..seq.ids.len() - 1 {
        let x = &emb[seq.ids[t] * e..(seq.ids[t] + 1) * e];
        let mut pre = vec![0.0; 4 * h];
        for j in 0..4 * h {
            let mut acc = bg[j];
            for k in 0..e {
                acc += x[k] * wx[k * 4 * h + j];
            }
            for k in 0..h {
                acc += hs[k] * wh[k * 4 * h + j];
            }
            pre[j] = acc;
        }
        let mut nd = vec![0.0; dd];
        for j in 0..dd {
            let mut acc = br[j];
            for k in 0..e {
                acc += x[k] * wrx[k * dd + j];
            }
            for k in 0..h {
                acc += hs[k] * wrh[k * dd + j];
            }
            nd[j] = sig(acc) * da[j];
        }
        let mut nc = vec![0.0; h];
        let mut nh = vec![0.0; h];
        for j in 0..h {
            let mut inj = 0.0;
            for k in 0..dd {
                inj += nd[k] * wd[k * h + j];
            }
            nc[j] = sig(pre[h + j]) * cs[j] + sig(pre[j]) * pre[3 * h + j].tanh() + inj.tanh();
            nh[j] = sig(pre[2 * h + j]) * nc[j].tanh();
        }
        let mut logits = vec![0.0; v];
        for (j, l) in logits.iter_mut().enumerate() {
            *l = bo[j];
            for k in 0..h {
                *l += nh[k] * wo[k * v + j];
            }
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        logps.push(logits.iter().map(|l| l - z.ln()).collect());
        hs = nh;
        cs = nc;
        da = nd;
        trace.push(da.clone());
    }
    (logps, trace)
}

fn oracle_nll(g: &Generator, p: &ParameterVector, seq: &Sequence) -> f64 {
    let (logps, _) = loop_oracle(g, p, seq);
    -(0..logps.len()).map(|t| logps[t][seq.ids[t + 1]]).sum::<f64>()
}

fn tape_nll(g: &Generator, p: &ParameterVector, batch: &[&Sequence], masks: Option<&DropoutMasks>) -> f64 {
    let mut tape = Tape::new();
    let nodes = ParamNodes::bind(&mut tape, p).unwrap();
    let loss = g.batch_nll(&mut tape, &nodes, batch, masks).unwrap();
    tape.value(loss).item()
}

#[test]
fn step_logits_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = small(5, 3);
    for _ in 0..10 {
        let p = random_params(&g, &mut rng, 0.8);
        let seq = random_seq(&mut rng, 5, 3, 6);
        let (want, _) = loop_oracle(&g, &p, &seq);

        let mut tape = Tape::new();
        let nodes = ParamNodes::bind(&mut tape, &p).unwrap();
        let mut state = g.initial_state(&mut tape, &[&seq.da]).unwrap();
        for t in 0..seq.ids.len() - 1 {
            let (next, logits) = g.step(&mut tape, &nodes, state, &[seq.ids[t]], None, None).unwrap();
            state = next;
            let lp = tape.log_softmax(logits).unwrap();
            for (a, b) in tape.value(lp).data().iter().zip(&want[t]) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn sequence_nll_matches_oracle_on_tape_and_plain_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = small(5, 3);
    for _ in 0..10 {
        let p = random_params(&g, &mut rng, 0.8);
        let seqs: Vec<Sequence> = (0..3).map(|i| random_seq(&mut rng, 5, 3, 2 + 2 * i)).collect();
        let refs: Vec<&Sequence> = seqs.iter().collect();
        let want: Vec<f64> = seqs.iter().map(|s| oracle_nll(&g, &p, s)).collect();
        let plain = g.sequence_nlls(&p, &refs).unwrap();
        for (a, b) in plain.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let mean = want.iter().sum::<f64>() / 3.0;
        assert!((tape_nll(&g, &p, &refs, None) - mean).abs() < 1e-12);
        assert!((g.mean_nll(&p, &refs).unwrap() - mean).abs() < 1e-12);
        let one = tape_nll(&g, &p, &[&seqs[2]], None);
        assert!((one - want[2]).abs() < 1e-12);
    }
}

#[test]
fn singleton_vocabulary_has_zero_nll() {
    let g = small(1, 2);
    let p = random_params(&g, &mut ChaCha8Rng::seed_from_u64(3), 0.5);
    let seq = Sequence {
        da: vec![1.0, 0.0],
        ids: vec![0; 6],
    };
    assert_eq!(tape_nll(&g, &p, &[&seq], None), 0.0);
}

#[test]
fn uniform_output_gives_length_times_log_vocab() {
    let g = Generator::new(10, 3, ModelConfig::default()).unwrap();
    let mut p = g.init_params(4);
    p.segment_mut("w_out").unwrap().fill(0.0);
    p.segment_mut("b_out").unwrap().fill(0.0);
    let seq = Sequence {
        da: vec![1.0, 1.0, 0.0],
        ids: vec![1, 4, 5, 6, 7, 8, 9, 2],
    };
    let want = 7.0 * 10f64.ln();
    assert!((tape_nll(&g, &p, &[&seq], None) - want).abs() < 1e-12);
    assert!((g.mean_nll(&p, &[&seq]).unwrap() - want).abs() < 1e-12);
}

#[test]
fn closed_reading_gate_clears_the_da() {
    let g = small(5, 3);
    let mut p = random_params(&g, &mut ChaCha8Rng::seed_from_u64(5), 0.5);
    p.segment_mut("b_r").unwrap().fill(-60.0);
    let w = g.weights(&p).unwrap();
    let s0 = g.plain_initial(&[&[1.0, 1.0, 1.0]]).unwrap();
    let (s1, _) = g.plain_step(&w, &s0, &[2]).unwrap();
    assert!(s1.da.data().iter().all(|&d| d.abs() < 1e-20));
}

#[test]
fn zero_da_injects_nothing() {
    let g = small(5, 3);
    let mut p = random_params(&g, &mut ChaCha8Rng::seed_from_u64(6), 0.5);
    let s0 = g.plain_initial(&[&[0.0, 0.0, 0.0]]).unwrap();
    let (a, la) = g.plain_step(&g.weights(&p).unwrap(), &s0, &[1]).unwrap();
    p.segment_mut("w_d").unwrap().fill(0.0);
    let (b, lb) = g.plain_step(&g.weights(&p).unwrap(), &s0, &[1]).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn da_decays_monotonically() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = small(6, 4);
    for _ in 0..20 {
        let p = random_params(&g, &mut rng, 3.0);
        let seq = random_seq(&mut rng, 6, 4, 12);
        let (_, trace) = loop_oracle(&g, &p, &seq);
        for w in trace.windows(2) {
            for (prev, next) in w[0].iter().zip(&w[1]) {
                assert!(*next <= *prev && *next >= 0.0);
            }
        }
    }
}

#[test]
fn gradient_matches_finite_differences_for_every_segment() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = small(5, 3);
    for _ in 0..3 {
        let p = random_params(&g, &mut rng, 0.5);
        let seqs: Vec<Sequence> = vec![random_seq(&mut rng, 5, 3, 4), random_seq(&mut rng, 5, 3, 6)];
        let refs: Vec<&Sequence> = seqs.iter().collect();
        let masks = DropoutMasks::sample(&mut rng, 2, 5, 3, 4, 0.25).unwrap();

        let mut tape = Tape::new();
        let nodes = ParamNodes::bind(&mut tape, &p).unwrap();
        let loss = g.batch_nll(&mut tape, &nodes, &refs, Some(&masks)).unwrap();
        let gr = grad(&tape, loss, &nodes).unwrap();

        let h = 1e-5;
        let mut x = p.clone();
        for i in 0..p.len() {
            let orig = x.as_slice()[i];
            x.as_mut_slice()[i] = orig + h;
            let fp = tape_nll(&g, &x, &refs, Some(&masks));
            x.as_mut_slice()[i] = orig - h;
            let fm = tape_nll(&g, &x, &refs, Some(&masks));
            x.as_mut_slice()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = gr.as_slice()[i];
            let err = (fd - an).abs();
            assert!(err <= 1e-7 || err <= 1e-4 * fd.abs().max(an.abs()), "param {i}: fd {fd} analytic {an}");
        }
    }
}

#[test]
fn all_ones_masks_are_bit_identical_to_no_dropout_and_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = small(5, 3);
    let p = random_params(&g, &mut rng, 0.5);
    let seq = random_seq(&mut rng, 5, 3, 5);
    let ones = DropoutMasks {
        embed: vec![NumericArray::full(&[1, 3], 1.0); 4],
        hidden: vec![NumericArray::full(&[1, 4], 1.0); 4],
    };
    let run = || {
        let mut tape = Tape::new();
        let nodes = ParamNodes::bind(&mut tape, &p).unwrap();
        let loss = g.batch_nll(&mut tape, &nodes, &[&seq], Some(&ones)).unwrap();
        (tape.value(loss).item(), grad(&tape, loss, &nodes).unwrap().into_vec())
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.0, tape_nll(&g, &p, &[&seq], None));
}

#[test]
fn bad_inputs_are_rejected() {
    let g = small(5, 3);
    let p = g.init_params(0);
    let mut tape = Tape::new();
    let nodes = ParamNodes::bind(&mut tape, &p).unwrap();
    let bad_id = Sequence {
        da: vec![1.0, 0.0, 0.0],
        ids: vec![1, 9],
    };
    assert!(matches!(
        g.batch_nll(&mut tape, &nodes, &[&bad_id], None),
        Err(GeneratorError::TokenOutOfRange { id: 9, .. })
    ));
    let short = Sequence {
        da: vec![1.0, 0.0, 0.0],
        ids: vec![1],
    };
    assert!(matches!(g.batch_nll(&mut tape, &nodes, &[&short], None), Err(GeneratorError::EmptySequence)));
    let bad_da = Sequence {
        da: vec![1.0],
        ids: vec![1, 2],
    };
    assert!(matches!(g.batch_nll(&mut tape, &nodes, &[&bad_da], None), Err(GeneratorError::Dimension(_))));
    assert!(Generator::new(5, 3, ModelConfig { dropout: 1.0, ..ModelConfig::default() }).is_err());
}

#[test]
fn init_is_seeded_and_bounded() {
    let g = small(5, 3);
    let a = g.init_params(11);
    assert_eq!(a, g.init_params(11));
    assert_ne!(a, g.init_params(12));
    assert!(a.as_slice().iter().all(|x| x.abs() < INIT_RANGE));
}

fn exhaustive(g: &Generator, p: &ParameterVector, da: &[f64], v: usize) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    for a in 0..v {
        for b in 0..v {
            let seq = Sequence {
                da: da.to_vec(),
                ids: vec![0, a, b],
            };
            out.push((vec![a, b], -oracle_nll(g, p, &seq)));
        }
    }
    out.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    out
}

#[test]
fn beam_matches_exhaustive_search_and_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = small(3, 2);
    let opts = |k| DecodeOptions {
        beam_width: k,
        max_len: 2,
        bos: 0,
        eos: None,
        banned: vec![],
    };
    for _ in 0..25 {
        let p = random_params(&g, &mut rng, 2.0);
        let da = [1.0, 1.0];
        let all = exhaustive(&g, &p, &da, 3);
        let beams = g.decode(&p, &da, &opts(9)).unwrap();
        assert_eq!(beams.len(), 9);
        for (h, (ids, lp)) in beams.iter().zip(&all) {
            assert_eq!(&h.ids, ids);
            assert!((h.logprob - lp).abs() < 1e-12);
        }
        assert!(beams.windows(2).all(|w| w[0].score >= w[1].score));

        let greedy = g.greedy(&p, &da, &opts(1)).unwrap();
        let one = g.decode(&p, &da, &opts(1)).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].ids, greedy.ids);
    }
}

#[test]
fn dominant_token_repeats_until_end() {
    let g = small(6, 2);
    let mut p = random_params(&g, &mut ChaCha8Rng::seed_from_u64(12), 0.3);
    p.segment_mut("b_out").unwrap()[4] = 80.0;
    let opts = DecodeOptions {
        beam_width: 3,
        max_len: 7,
        ..DecodeOptions::default()
    };
    let best = &g.decode(&p, &[1.0, 0.0], &opts).unwrap()[0];
    assert_eq!(best.ids, vec![4; 7]);

    p.segment_mut("b_out").unwrap()[EOS] = 200.0;
    let best = &g.decode(&p, &[1.0, 0.0], &opts).unwrap()[0];
    assert_eq!(best.ids, vec![EOS]);
}

#[test]
fn decode_rejects_degenerate_options() {
    let g = small(5, 2);
    let p = g.init_params(0);
    let zero_width = DecodeOptions {
        beam_width: 0,
        ..DecodeOptions::default()
    };
    assert!(g.decode(&p, &[1.0, 0.0], &zero_width).is_err());
}

mod vocabulary {
    use super::*;
    use crate::corpus::{gen_synthetic, placeholder, Corpus, SynthSpec};

    #[test]
    fn reserved_placeholders_and_words() {
        let f = gen_synthetic(
            &SynthSpec {
                examples: 50,
                ..SynthSpec::default()
            },
            1,
        );
        let c = Corpus::from_records(f.schema, f.records).unwrap();
        let v = Vocabulary::build(&c.schema, &c.examples);
        assert_eq!(&v.tokens()[..4], &["<pad>", "<s>", "</s>", "<unk>"]);
        for (d, s) in c.schema.slot_features() {
            let id = v.get(&placeholder(&d, &s)).unwrap();
            assert!((4..4 + c.schema.slot_features().len()).contains(&id));
        }
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), i);
        }
        let ex = &c.examples[0];
        let ids = v.encode(&ex.tokens);
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(v.decode(&ids), ex.tokens);
        assert_eq!(v.id("never-seen"), UNK);

        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["a","b"]"#).is_err());

        let seq = encode_example(&c.schema, &v, ex).unwrap();
        assert_eq!(seq.da.len(), c.schema.da_dim());
    }
}
