//! Central finite-difference oracle for graph operations and whole loss graphs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satlm::data::{tokenize, TokenBatch, Vocab};
use satlm::model::{Segmenter, StructureLm};
use satlm::objectives::StructureMode;
use satlm::syntax::{phrase_embed, segment_phrases, PhraseSegmentation};
use satlm::tensor::{Graph, ParamStore, Tensor, Var};
use satlm::training::{finetune_graph, mask_batch, pretrain_graph, stream_rng, RngStream, TrainConfig};
use satlm::treebank::{parse_ptb_bracketed, DependencyGraph, GoldDistanceMode, GoldSyntax};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: u64 = 16;
/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Values bounded away from zero so kinks stay outside the difference stencil.
fn kink_free(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;
type LossOf<'a> = dyn Fn(&ParamStore<f64>) -> (Graph<f64>, Var) + 'a;

/// Projects the op output onto fixed random weights so every output element
/// contributes to the scalar loss.
fn scalar_loss(g: &mut Graph<f64>, out: Var) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = random_tensor(&mut rng, g.shape(out));
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn eval(inputs: &[Tensor<f64>], build: &Build<'_>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = scalar_loss(&mut g, out);
    g.value(loss).item()
}

/// Largest relative error between analytic and numeric gradients over every input element.
pub fn check_inputs(inputs: &[Tensor<f64>], build: &Build<'_>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = scalar_loss(&mut g, out);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Worst error over `INSTANCES` random instances of one op.
fn over_instances(make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, build: &Build<'_>) -> f64 {
    (0..INSTANCES)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            check_inputs(&make(&mut rng), build)
        })
        .fold(0.0, f64::max)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5))
}

/// Worst relative error per elementary op.
pub fn op_checks() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    out.push((
        "matmul",
        over_instances(
            |r| {
                let (m, k, n) = dims(r);
                vec![random_tensor(r, &[m, k]), random_tensor(r, &[k, n])]
            },
            &|g, v| g.matmul(v[0], v[1]).unwrap(),
        ),
    ));
    out.push((
        "matmul_t",
        over_instances(
            |r| {
                let (m, k, n) = dims(r);
                vec![random_tensor(r, &[m, k]), random_tensor(r, &[n, k])]
            },
            &|g, v| g.matmul_t(v[0], v[1]).unwrap(),
        ),
    ));
    out.push((
        "transpose",
        over_instances(
            |r| {
                let (m, n, _) = dims(r);
                vec![random_tensor(r, &[m, n])]
            },
            &|g, v| g.transpose(v[0]).unwrap(),
        ),
    ));
    out.push((
        "add",
        over_instances(
            |r| {
                let (m, n, _) = dims(r);
                vec![random_tensor(r, &[m, n]), random_tensor(r, &[m, n])]
            },
            &|g, v| g.add(v[0], v[1]).unwrap(),
        ),
    ));
    out.push((
        "add_row_broadcast",
        over_instances(
            |r| {
                let (m, n, _) = dims(r);
                vec![random_tensor(r, &[m, n]), random_tensor(r, &[n])]
            },
            &|g, v| g.add(v[0], v[1]).unwrap(),
        ),
    ));
    out.push((
        "mul",
        over_instances(
            |r| {
                let (m, n, _) = dims(r);
                vec![random_tensor(r, &[m, n]), random_tensor(r, &[m, n])]
            },
            &|g, v| g.mul(v[0], v[1]).unwrap(),
        ),
    ));
    out.push((
        "mul_scalar_broadcast",
        over_instances(
            |r| {
                let (m, n, _) = dims(r);
                vec![random_tensor(r, &[m, n]), random_tensor(r, &[1])]
            },
            &|g, v| g.mul(v[0], v[1]).unwrap(),
        ),
    ));
    out.push((
        "mul_row_broadcast",
        over_instances(
            |r| {
                let (m, n, _) = dims(r);
                vec![random_tensor(r, &[m, n]), random_tensor(r, &[1, n])]
            },
            &|g, v| g.mul(v[0], v[1]).unwrap(),
        ),
    ));
    out.push((
        "affine",
        over_instances(|r| vec![random_tensor(r, &[3, 2])], &|g, v| g.affine(v[0], -0.7, 0.4)),
    ));
    out.push((
        "scale",
        over_instances(|r| vec![random_tensor(r, &[2, 3])], &|g, v| g.scale(v[0], 1.7)),
    ));
    out.push((
        "sigmoid",
        over_instances(|r| vec![random_tensor(r, &[3, 3])], &|g, v| g.sigmoid(v[0])),
    ));
    out.push((
        "relu",
        over_instances(|r| vec![kink_free(r, &[3, 4])], &|g, v| g.relu(v[0])),
    ));
    out.push((
        "softmax",
        over_instances(
            |r| {
                let (m, n, _) = dims(r);
                vec![random_tensor(r, &[m, n])]
            },
            &|g, v| g.softmax(v[0]).unwrap(),
        ),
    ));
    out.push((
        "layer_norm",
        over_instances(
            |r| {
                let m = r.gen_range(1..4);
                let n = r.gen_range(3..7);
                vec![random_tensor(r, &[m, n]), random_tensor(r, &[n]), random_tensor(r, &[n])]
            },
            &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        ),
    ));
    out.push((
        "conv1d",
        over_instances(
            |r| {
                let n = r.gen_range(1..6);
                let c_in = r.gen_range(1..4);
                let c_out = r.gen_range(1..4);
                let k = [1, 3, 5][r.gen_range(0..3)];
                vec![random_tensor(r, &[n, c_in]), random_tensor(r, &[k, c_in, c_out])]
            },
            &|g, v| g.conv1d(v[0], v[1]).unwrap(),
        ),
    ));
    out.push((
        "select_rows",
        over_instances(|r| vec![random_tensor(r, &[4, 3])], &|g, v| {
            g.select_rows(v[0], &[2, 0, 2, 3]).unwrap()
        }),
    ));
    out.push((
        "slice_cols",
        over_instances(|r| vec![random_tensor(r, &[3, 5])], &|g, v| g.slice_cols(v[0], 1, 3).unwrap()),
    ));
    out.push((
        "concat_cols",
        over_instances(
            |r| vec![random_tensor(r, &[3, 2]), random_tensor(r, &[3, 1]), random_tensor(r, &[3, 3])],
            &|g, v| g.concat_cols(v).unwrap(),
        ),
    ));
    out.push((
        "reshape",
        over_instances(|r| vec![random_tensor(r, &[2, 6])], &|g, v| g.reshape(v[0], &[3, 4]).unwrap()),
    ));
    out.push((
        "index",
        over_instances(|r| vec![random_tensor(r, &[5])], &|g, v| g.index(v[0], 3).unwrap()),
    ));
    out.push((
        "sum",
        over_instances(|r| vec![random_tensor(r, &[3, 2])], &|g, v| g.sum(v[0])),
    ));
    out.push((
        "mean",
        over_instances(|r| vec![random_tensor(r, &[3, 2])], &|g, v| g.mean(v[0])),
    ));
    out.push((
        "mean_rows",
        over_instances(|r| vec![random_tensor(r, &[4, 3])], &|g, v| g.mean_rows(v[0]).unwrap()),
    ));
    out.push((
        "add_n",
        over_instances(
            |r| (0..3).map(|_| random_tensor(r, &[2, 2])).collect(),
            &|g, v| g.add_n(v).unwrap(),
        ),
    ));
    out.push((
        "cross_entropy",
        over_instances(
            |r| vec![random_tensor(r, &[3, 5])],
            &|g, v| g.cross_entropy(v[0], &[4, 0, 2]).unwrap(),
        ),
    ));
    out.push((
        "dropout",
        over_instances(|r| vec![random_tensor(r, &[4, 4])], &|g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            g.dropout(v[0], 0.3, &mut rng)
        }),
    ));
    out
}

/// Phrase pooling and the structure loss with inputs as free leaves. The
/// segmentation (and its membership constants) is fixed from the unperturbed
/// distances, matching how the model treats it.
pub fn syntax_checks() -> Vec<(&'static str, f64)> {
    let mut pool_worst: f64 = 0.0;
    let mut loss_worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = r.gen_range(2..7);
        let inputs = vec![random_tensor(&mut r, &[n, 1]), random_tensor(&mut r, &[n, 3]), random_tensor(&mut r, &[n, 3])];
        let seg: PhraseSegmentation<f64> = segment_phrases(inputs[0].data(), 0.5);
        let pool = |g: &mut Graph<f64>, v: &[Var]| {
            let phrases = phrase_embed(g, &seg, v[0], v[1]).unwrap();
            let rows: Vec<Var> = phrases.iter().map(|p| p.embedding).collect();
            g.concat_cols(&rows).unwrap()
        };
        pool_worst = pool_worst.max(check_inputs(&inputs, &pool));
        let loss = |g: &mut Graph<f64>, v: &[Var]| {
            let phrases = phrase_embed(g, &seg, v[0], v[1]).unwrap();
            let outside = g.select_rows(v[2], &[0]).unwrap();
            let negatives: Vec<Vec<Var>> = (0..phrases.len())
                .map(|m| {
                    let mut others: Vec<Var> = (0..phrases.len()).filter(|&k| k != m).map(|k| phrases[k].embedding).collect();
                    others.push(outside);
                    others
                })
                .collect();
            satlm::objectives::structure_loss(g, &phrases, v[2], &negatives).unwrap().total
        };
        loss_worst = loss_worst.max(check_inputs(&inputs, &loss));
    }
    vec![("phrase_embed", pool_worst), ("structure_loss", loss_worst)]
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        n_layers: 4,
        n_heads: 2,
        d_model: 6,
        d_ff: 8,
        max_len: 12,
        structure_layer: Some(2),
        negatives: 3,
        ..TrainConfig::default()
    }
}

pub fn tiny_sentences() -> Vec<Vec<String>> {
    ["the dog saw a small cat", "a cat ran to the park", "dogs bark"]
        .iter()
        .map(|s| tokenize(s))
        .collect()
}

/// Outcome of probing parameter coordinates of one loss.
#[derive(Clone, Copy, Debug, Default)]
pub struct ParamCheck {
    pub worst: f64,
    pub probed: usize,
    /// Coordinates whose difference stencil straddled a relu kink.
    pub straddled: usize,
}

/// Worst relative error of parameter gradients for a loss rebuilt from the store.
///
/// Up to `per_param` coordinates of every parameter are probed. Coordinates
/// whose `±STEP` evaluations switch any relu are counted and skipped, since a
/// central difference across a kink does not estimate either one-sided slope.
pub fn check_params(
    store: &ParamStore<f64>,
    per_param: usize,
    loss_of: &LossOf<'_>,
) -> ParamCheck {
    let (mut g, loss) = loss_of(store);
    let pattern = g.relu_pattern();
    g.backward(loss).unwrap();
    let mut grads = store.clone();
    grads.zero_grads();
    g.write_param_grads(&mut grads);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut out = ParamCheck::default();
    for (id, p) in store.iter() {
        let n = p.value.numel();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            let mut plus = store.clone();
            plus.value_mut(id).data_mut()[i] += STEP;
            let mut minus = store.clone();
            minus.value_mut(id).data_mut()[i] -= STEP;
            let (gp, lp) = loss_of(&plus);
            let (gm, lm) = loss_of(&minus);
            if gp.relu_pattern() != pattern || gm.relu_pattern() != pattern {
                out.straddled += 1;
                continue;
            }
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * STEP);
            let e = relative_error(grads.grad(id).data()[i], numeric);
            out.worst = out.worst.max(e);
            out.probed += 1;
        }
    }
    out
}

/// Overwrites every parameter with O(1) values so the difference step is
/// small against the parameter scale.
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
}

fn tiny_model(cfg: TrainConfig) -> StructureLm<f64> {
    let sents = tiny_sentences();
    let vocab = Vocab::build(&sents, 1).unwrap();
    let seed = cfg.seed;
    let mut model = StructureLm::new(vocab, cfg).unwrap();
    randomize(&mut model.store, seed);
    model
}

fn tiny_batch(model: &StructureLm<f64>) -> TokenBatch {
    let sents = tiny_sentences();
    TokenBatch::from_sequences(sents.iter().map(|s| model.encode_tokens(s)).collect(), vec![0, 1, 2]).unwrap()
}

/// Full pre-training loss (masked LM plus weighted structure loss) with the
/// induced segmentation held fixed.
pub fn pretrain_graph_check(seed: u64) -> ParamCheck {
    let cfg = TrainConfig { seed, ..tiny_config() };
    let model = tiny_model(cfg.clone());
    let batch = tiny_batch(&model);
    let plan = mask_batch(&batch, model.vocab().len(), 0.3, false, &mut stream_rng(seed, RngStream::Mask)).unwrap();
    let segs: Vec<PhraseSegmentation<f64>> = (0..batch.len())
        .map(|b| model.induce(&tiny_sentences()[b], cfg.lambda_unsup).unwrap().1)
        .collect();
    let loss_of = |store: &ParamStore<f64>| {
        let m = StructureLm::from_parts(model.vocab().clone(), cfg.clone(), store.clone(), None).unwrap();
        let segmenters: Vec<Segmenter<'_, f64>> = segs.iter().map(Segmenter::Fixed).collect();
        let mut neg = stream_rng(seed, RngStream::Negatives);
        let step = pretrain_graph(&m, &batch, &plan, &segmenters, cfg.gamma_pre, cfg.negatives, &mut neg, None).unwrap();
        (step.graph, step.total)
    };
    check_params(&model.store, 4, &loss_of)
}

/// Pre-training loss with gold distances and spans injected.
pub fn supervised_graph_check(seed: u64) -> ParamCheck {
    let cfg = TrainConfig {
        seed,
        mode: StructureMode::Supervised,
        ..tiny_config()
    };
    let model = tiny_model(cfg.clone());
    let batch = tiny_batch(&model);
    let trees = [
        ("(S (NP the dog) (VP saw (NP a small cat)))", vec![2, 3, 0, 6, 6, 3]),
        ("(S (NP a cat) (VP ran (PP to (NP the park))))", vec![2, 3, 0, 3, 6, 4]),
        ("(S (NP dogs) (VP bark))", vec![2, 0]),
    ];
    let gold: Vec<GoldSyntax> = trees
        .iter()
        .map(|(t, h)| {
            GoldSyntax::new(
                parse_ptb_bracketed(t).unwrap(),
                Some(DependencyGraph::new(h.clone()).unwrap()),
                GoldDistanceMode::DepDepth,
            )
            .unwrap()
        })
        .collect();
    let plan = mask_batch(&batch, model.vocab().len(), 0.3, false, &mut stream_rng(seed, RngStream::Mask)).unwrap();
    let loss_of = |store: &ParamStore<f64>| {
        let m = StructureLm::from_parts(model.vocab().clone(), cfg.clone(), store.clone(), None).unwrap();
        let segmenters: Vec<Segmenter<'_, f64>> = gold.iter().map(Segmenter::Gold).collect();
        let mut neg = stream_rng(seed, RngStream::Negatives);
        let step = pretrain_graph(&m, &batch, &plan, &segmenters, cfg.gamma_pre, cfg.negatives, &mut neg, None).unwrap();
        (step.graph, step.total)
    };
    check_params(&model.store, 4, &loss_of)
}

/// Fine-tuning loss (classification plus weighted structure loss).
///
/// Parameters, classifier included, are re-drawn after the head is attached.
pub fn finetune_graph_check(seed: u64) -> ParamCheck {
    let cfg = TrainConfig { seed, ..tiny_config() };
    let mut model = tiny_model(cfg.clone());
    model.attach_classifier(vec!["a".into(), "b".into()]).unwrap();
    randomize(&mut model.store, seed);
    let batch = tiny_batch(&model);
    let classes = model.classifier().unwrap().classes().to_vec();
    let segs: Vec<PhraseSegmentation<f64>> = (0..batch.len())
        .map(|b| model.induce(&tiny_sentences()[b], cfg.lambda_unsup).unwrap().1)
        .collect();
    let loss_of = |store: &ParamStore<f64>| {
        let m = StructureLm::from_parts(model.vocab().clone(), cfg.clone(), store.clone(), Some(classes.clone())).unwrap();
        let mut neg = stream_rng(seed, RngStream::Negatives);
        let segmenters: Vec<Segmenter<'_, f64>> = segs.iter().map(Segmenter::Fixed).collect();
        let step = finetune_graph(&m, &batch, &[0, 1, 0], &segmenters, &cfg, &mut neg, None).unwrap();
        (step.graph, step.total)
    };
    check_params(&model.store, 4, &loss_of)
}

/// Encoder stack alone on a padded batch, projected onto fixed weights.
pub fn encoder_check(seed: u64) -> ParamCheck {
    let cfg = TrainConfig { seed, ..tiny_config() };
    let model = tiny_model(cfg.clone());
    let batch = tiny_batch(&model);
    let loss_of = |store: &ParamStore<f64>| {
        let m = StructureLm::from_parts(model.vocab().clone(), cfg.clone(), store.clone(), None).unwrap();
        let mut g = Graph::new();
        let acts = m.encode(&mut g, &batch, None).unwrap();
        let tops: Vec<Var> = acts.iter().map(|a| scalar_loss(&mut g, a.top())).collect();
        let loss = g.add_n(&tops).unwrap();
        (g, loss)
    };
    check_params(&model.store, 4, &loss_of)
}
