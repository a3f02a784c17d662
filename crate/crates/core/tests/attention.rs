use hoi_core::attention::*;
use hoi_core::nn::{random_normal, seeded_rng, ParamStore, Session};
use hoi_core::tensor::gradcheck::grad_check_many;
use hoi_core::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn triplet_weights(g: &mut Graph, d: usize, rng: &mut ChaCha8Rng) -> TripletWeights {
    let mut m = || g.constant(random_normal(&[d, d], 0.4, rng));
    TripletWeights {
        query: m(),
        key: m(),
        value_human: m(),
        value_object: m(),
        out: m(),
    }
}

fn attn_weights(g: &mut Graph, d: usize, rng: &mut ChaCha8Rng) -> AttentionWeights {
    let mut m = || g.constant(random_normal(&[d, d], 0.4, rng));
    AttentionWeights {
        query: m(),
        key: m(),
        value: m(),
        out: m(),
    }
}

fn vec_mat(v: &[f64], m: &Tensor) -> Vec<f64> {
    let d = m.shape()[1];
    (0..d).map(|c| v.iter().enumerate().map(|(r, x)| x * m.at(&[r, c])).sum()).collect()
}

fn row(t: &Tensor, prefix: &[usize]) -> Vec<f64> {
    let d = *t.shape().last().unwrap();
    let mut idx = prefix.to_vec();
    idx.push(0);
    (0..d)
        .map(|c| {
            *idx.last_mut().unwrap() = c;
            t.at(&idx)
        })
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[test]
fn triplet_attention_matches_oracle_on_50_instances() {
    let mut rng = seeded_rng(100);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (nh, na, no) = (rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6));
        let d = rng.random_range(1..=16);
        let fq = random_normal(&[nh, na, d], 1.0, &mut rng);
        let fk = random_normal(&[na, no, d], 1.0, &mut rng);
        let fv = random_normal(&[nh, na, no, d], 1.0, &mut rng);
        let out = random_normal(&[d, d], 0.5, &mut rng);
        let mut g = Graph::new();
        let qkv = TripletQkv {
            query: g.constant(fq.clone()),
            key: g.constant(fk.clone()),
            value: g.constant(fv.clone()),
        };
        let o = g.constant(out.clone());
        let r = triplet_attention(&mut g, &qkv, o).unwrap();
        let expect = triplet_oracle(&fq, &fk, &fv, &out).unwrap();
        worst = worst.max(g.value(r.output).max_abs_diff(&expect));

        let sums = g.sum(r.weights, 1).unwrap();
        assert!(g.value(r.weights).data().iter().all(|&w| w >= 0.0));
        assert!(g.value(sums).data().iter().all(|s| (s - 1.0).abs() < 1e-9));
    }
    assert!(worst < 1e-10, "max deviation {worst}");
}

#[test]
fn triplet_attention_random_3_4_5_8() {
    let mut rng = seeded_rng(101);
    let fq = random_normal(&[3, 4, 8], 1.0, &mut rng);
    let fk = random_normal(&[4, 5, 8], 1.0, &mut rng);
    let fv = random_normal(&[3, 4, 5, 8], 1.0, &mut rng);
    let out = random_normal(&[8, 8], 0.5, &mut rng);
    let mut g = Graph::new();
    let qkv = TripletQkv {
        query: g.constant(fq.clone()),
        key: g.constant(fk.clone()),
        value: g.constant(fv.clone()),
    };
    let o = g.constant(out.clone());
    let r = triplet_attention(&mut g, &qkv, o).unwrap();
    assert_eq!(g.shape(r.output), &[3, 5, 8]);
    let expect = triplet_oracle(&fq, &fk, &fv, &out).unwrap();
    assert!(g.value(r.output).max_abs_diff(&expect) < 1e-10);
}

#[test]
fn single_action_gives_projected_value() {
    let mut rng = seeded_rng(102);
    let fq = random_normal(&[2, 1, 4], 1.0, &mut rng);
    let fk = random_normal(&[1, 3, 4], 1.0, &mut rng);
    let fv = random_normal(&[2, 1, 3, 4], 1.0, &mut rng);
    let out = random_normal(&[4, 4], 1.0, &mut rng);
    let y = triplet_oracle(&fq, &fk, &fv, &out).unwrap();
    for i in 0..2 {
        for j in 0..3 {
            let expect = vec_mat(&row(&fv, &[i, 0, j]), &out);
            for (a, b) in row(&y, &[i, j]).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn uniform_logits_average_values() {
    let mut rng = seeded_rng(103);
    let (nh, na, no, d) = (2, 3, 2, 4);
    // Fk constant over n → logits constant over n for every (i, j).
    let fq = random_normal(&[nh, 1, d], 1.0, &mut rng);
    let fq = Tensor::new(
        vec![nh, na, d],
        (0..nh).flat_map(|i| (0..na).flat_map(move |_| (0..d).map(move |c| (i, c)))).map(|(i, c)| fq.at(&[i, 0, c])).collect(),
    )
    .unwrap();
    let fk = Tensor::full(&[na, no, d], 0.3);
    let fv = random_normal(&[nh, na, no, d], 1.0, &mut rng);
    let out = random_normal(&[d, d], 1.0, &mut rng);
    let mut g = Graph::new();
    let qkv = TripletQkv {
        query: g.constant(fq),
        key: g.constant(fk),
        value: g.constant(fv.clone()),
    };
    let o = g.constant(out.clone());
    let r = triplet_attention(&mut g, &qkv, o).unwrap();
    for w in g.value(r.weights).data() {
        assert!((w - 1.0 / na as f64).abs() < 1e-12);
    }
    for i in 0..nh {
        for j in 0..no {
            let mut mean = vec![0.0; d];
            for n in 0..na {
                mean = add(&mean, &row(&fv, &[i, n, j]));
            }
            mean.iter_mut().for_each(|m| *m /= na as f64);
            let expect = vec_mat(&mean, &out);
            for (a, b) in row(g.value(r.output), &[i, j]).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn action_permutation_leaves_output_unchanged() {
    let mut rng = seeded_rng(104);
    let (nh, na, no, d) = (3, 5, 4, 6);
    let fq = random_normal(&[nh, na, d], 1.0, &mut rng);
    let fk = random_normal(&[na, no, d], 1.0, &mut rng);
    let fv = random_normal(&[nh, na, no, d], 1.0, &mut rng);
    let out = random_normal(&[d, d], 1.0, &mut rng);
    let perm = [3, 0, 4, 1, 2];
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(fq), g.constant(fk), g.constant(fv));
    let o = g.constant(out);
    let base = triplet_attention(&mut g, &TripletQkv { query: q, key: k, value: v }, o).unwrap();
    let qp = g.index_select(q, 1, &perm).unwrap();
    let kp = g.index_select(k, 0, &perm).unwrap();
    let vp = g.index_select(v, 1, &perm).unwrap();
    let permuted = triplet_attention(&mut g, &TripletQkv { query: qp, key: kp, value: vp }, o).unwrap();
    assert!(g.value(base.output).max_abs_diff(g.value(permuted.output)) < 1e-12);
}

#[test]
fn triplet_values_match_per_cell_loops() {
    let mut rng = seeded_rng(105);
    let (nh, na, no, d) = (3, 2, 4, 5);
    for mode in [PairStateInTerms::Mean, PairStateInTerms::Omit] {
        let x = random_normal(&[nh, no, d], 1.0, &mut rng);
        let qh = random_normal(&[nh, d], 1.0, &mut rng);
        let qa = random_normal(&[na, d], 1.0, &mut rng);
        let qo = random_normal(&[no, d], 1.0, &mut rng);
        let mut g = Graph::new();
        let w = triplet_weights(&mut g, d, &mut rng);
        let (vx, vh, va, vo) = (g.constant(x.clone()), g.constant(qh.clone()), g.constant(qa.clone()), g.constant(qo.clone()));
        let qkv = build_triplet_qkv(&mut g, vx, vh, va, vo, &w, mode).unwrap();
        let wq = g.value(w.query).clone();
        let wk = g.value(w.key).clone();
        let wvh = g.value(w.value_human).clone();
        let wvo = g.value(w.value_object).clone();

        let zero = vec![0.0; d];
        let mean_over = |fix_i: Option<usize>, fix_j: Option<usize>| -> Vec<f64> {
            if mode == PairStateInTerms::Omit {
                return zero.clone();
            }
            let mut acc = vec![0.0; d];
            let mut count = 0.0;
            for i in 0..nh {
                for j in 0..no {
                    if fix_i.is_some_and(|f| f != i) || fix_j.is_some_and(|f| f != j) {
                        continue;
                    }
                    acc = add(&acc, &row(&x, &[i, j]));
                    count += 1.0;
                }
            }
            acc.iter().map(|v| v / count).collect()
        };

        for i in 0..nh {
            for n in 0..na {
                let s = add(&add(&mean_over(Some(i), None), &row(&qh, &[i])), &row(&qa, &[n]));
                let expect = vec_mat(&s, &wq);
                for (a, b) in row(g.value(qkv.query), &[i, n]).iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
        for n in 0..na {
            for j in 0..no {
                let s = add(&add(&row(&qa, &[n]), &row(&qo, &[j])), &mean_over(None, Some(j)));
                let expect = vec_mat(&s, &wk);
                for (a, b) in row(g.value(qkv.key), &[n, j]).iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
        for i in 0..nh {
            for n in 0..na {
                for j in 0..no {
                    let xij = row(&x, &[i, j]);
                    let left = vec_mat(&add(&add(&xij, &row(&qh, &[i])), &row(&qa, &[n])), &wvh);
                    let right = vec_mat(&add(&add(&xij, &row(&qa, &[n])), &row(&qo, &[j])), &wvo);
                    for (c, got) in row(g.value(qkv.value), &[i, n, j]).iter().enumerate() {
                        assert!((got - left[c] * right[c]).abs() < 1e-10);
                    }
                }
            }
        }
    }
}

#[test]
fn all_zero_inputs_give_zero_embeddings() {
    let mut rng = seeded_rng(106);
    let mut g = Graph::new();
    let w = triplet_weights(&mut g, 4, &mut rng);
    let x = g.constant(Tensor::zeros(&[2, 3, 4]));
    let qh = g.constant(Tensor::zeros(&[2, 4]));
    let qa = g.constant(Tensor::zeros(&[5, 4]));
    let qo = g.constant(Tensor::zeros(&[3, 4]));
    let qkv = build_triplet_qkv(&mut g, x, qh, qa, qo, &w, PairStateInTerms::Mean).unwrap();
    assert_eq!(g.shape(qkv.value), &[2, 5, 3, 4]);
    for v in [qkv.query, qkv.key, qkv.value] {
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn mismatched_query_width_is_dimension_error() {
    let mut rng = seeded_rng(107);
    let mut g = Graph::new();
    let w = triplet_weights(&mut g, 4, &mut rng);
    let x = g.constant(Tensor::zeros(&[2, 3, 4]));
    let qh = g.constant(Tensor::zeros(&[2, 4]));
    let qa = g.constant(Tensor::zeros(&[5, 3]));
    let qo = g.constant(Tensor::zeros(&[3, 4]));
    assert!(build_triplet_qkv(&mut g, x, qh, qa, qo, &w, PairStateInTerms::Mean).is_err());
}

#[test]
fn self_attention_matches_two_loop_reference() {
    let mut rng = seeded_rng(108);
    let (n, d) = (4, 8);
    let x = random_normal(&[n, d], 1.0, &mut rng);
    let pq = random_normal(&[n, d], 1.0, &mut rng);
    let mut g = Graph::new();
    let w = attn_weights(&mut g, d, &mut rng);
    let (vx, vp) = (g.constant(x.clone()), g.constant(pq.clone()));
    let y = self_attention(&mut g, vx, vp, &w).unwrap();
    let (wq, wk, wv, wo) = (
        g.value(w.query).clone(),
        g.value(w.key).clone(),
        g.value(w.value).clone(),
        g.value(w.out).clone(),
    );
    let s: Vec<Vec<f64>> = (0..n).map(|i| add(&row(&x, &[i]), &row(&pq, &[i]))).collect();
    for i in 0..n {
        let fq = vec_mat(&s[i], &wq);
        let logits: Vec<f64> = (0..n)
            .map(|m| {
                let fk = vec_mat(&s[m], &wk);
                fq.iter().zip(&fk).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let mut mixed = vec![0.0; d];
        for m in 0..n {
            let a = logits[m].exp() / z;
            let fv = vec_mat(&s[m], &wv);
            mixed.iter_mut().zip(&fv).for_each(|(acc, v)| *acc += a * v);
        }
        let expect = vec_mat(&mixed, &wo);
        for (a, b) in row(g.value(y), &[i]).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn identity_weights_mix_orthonormal_rows() {
    let d = 3;
    let mut g = Graph::new();
    let eye = Tensor::new(vec![d, d], (0..d * d).map(|k| if k % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    let id = g.constant(eye.clone());
    let w = AttentionWeights { query: id, key: id, value: id, out: id };
    let x = g.constant(eye);
    let pq = g.constant(Tensor::zeros(&[d, d]));
    let y = self_attention(&mut g, x, pq, &w).unwrap();
    // Row i: weight e/(e+2) on itself, 1/(e+2) on the others, scaled by 1/√3 in the exponent.
    let e = (1.0 / (d as f64).sqrt()).exp();
    for i in 0..d {
        let r = row(g.value(y), &[i]);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((r[i] - e / (e + 2.0)).abs() < 1e-12);
    }
}

#[test]
fn decoder_layer_residual_identity_and_single_memory() {
    let mut rng = seeded_rng(109);
    let d = 4;
    let mut store = ParamStore::new();
    let p = DecoderLayerParams::new(&mut store, "dec", hoi_core::nn::ParamGroup::HumanDecoder, d, 8, &mut rng);
    // Zero the FFN output projection so only attention can move the queries.
    for id in [p.ffn.down.weight, p.ffn.down.bias.unwrap()] {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut s = Session::new(&store);
    let layer = p.bind(&mut s);
    let q = random_normal(&[3, d], 1.0, &mut rng);
    let queries = s.graph.constant(q.clone());
    let memory = s.graph.constant(Tensor::zeros(&[5, d]));
    let y = decoder_layer(&mut s.graph, queries, memory, &layer).unwrap();
    assert!(s.graph.value(y).max_abs_diff(&q) < 1e-12);

    // One memory slot: every query receives the same cross-attention update.
    let m = s.graph.constant(random_normal(&[1, d], 1.0, &mut rng));
    let y = decoder_layer(&mut s.graph, queries, m, &layer).unwrap();
    let delta = s.graph.sub(y, queries).unwrap();
    let dv = s.graph.value(delta);
    for i in 1..3 {
        for c in 0..d {
            assert!((dv.at(&[i, c]) - dv.at(&[0, c])).abs() < 1e-12);
        }
    }

    let bad = s.graph.constant(Tensor::zeros(&[2, d + 1]));
    assert!(decoder_layer(&mut s.graph, queries, bad, &layer).is_err());
}

#[test]
fn stacked_decoder_layers_preserve_shape() {
    let mut rng = seeded_rng(110);
    let mut store = ParamStore::new();
    let layers: Vec<_> = (0..3)
        .map(|l| DecoderLayerParams::new(&mut store, &format!("dec{l}"), hoi_core::nn::ParamGroup::ActionDecoder, 8, 16, &mut rng))
        .collect();
    let mut s = Session::new(&store);
    let mut x = s.graph.constant(random_normal(&[6, 8], 1.0, &mut rng));
    let mem = s.graph.constant(random_normal(&[10, 8], 1.0, &mut rng));
    for p in &layers {
        let l = p.bind(&mut s);
        x = decoder_layer(&mut s.graph, x, mem, &l).unwrap();
    }
    assert_eq!(s.graph.shape(x), &[6, 8]);
}

fn query_set(g: &mut Graph, role: Role, t: Tensor) -> QuerySet {
    let n = t.shape()[0];
    let embeddings = g.leaf(t);
    let scores = g.constant(Tensor::full(&[n], 0.5));
    QuerySet { role, embeddings, scores }
}

fn interaction_layers(store: &mut ParamStore, d: usize, l: usize, triplet: bool, rng: &mut ChaCha8Rng) -> Vec<InteractionLayerParams> {
    (0..l)
        .map(|i| InteractionLayerParams::new(store, &format!("inter{i}"), d, 2 * d, triplet, rng))
        .collect()
}

#[test]
fn interaction_decoder_shape_at_desk_scale() {
    let mut rng = seeded_rng(111);
    let (n, d) = (16, 64);
    let mut store = ParamStore::new();
    let params = interaction_layers(&mut store, d, 3, true, &mut rng);
    let mut s = Session::new(&store);
    let layers: Vec<_> = params.iter().map(|p| p.bind(&mut s)).collect();
    let g = &mut s.graph;
    let qh = query_set(g, Role::Human, random_normal(&[n, d], 1.0, &mut rng));
    let qa = query_set(g, Role::Action, random_normal(&[n, d], 1.0, &mut rng));
    let qo = query_set(g, Role::Object, random_normal(&[n, d], 1.0, &mut rng));
    let mem = g.constant(random_normal(&[20, d], 1.0, &mut rng));
    let x0 = g.constant(Tensor::zeros(&[n, n, d]));
    let input = ReasonerInput::Triplet { human: &qh, action: &qa, object: &qo, mode: PairStateInTerms::Mean };
    let y = interaction_decoder(g, mem, input, x0, &layers).unwrap();
    assert_eq!(g.shape(y.pairs.embeddings), &[16, 16, 64]);
    assert_eq!(g.shape(y.action_weights.unwrap()), &[16, 16, 16]);
}

#[test]
fn interaction_decoder_with_zero_weights_is_identity() {
    let mut rng = seeded_rng(112);
    let d = 4;
    let mut store = ParamStore::new();
    interaction_layers(&mut store, d, 2, true, &mut rng);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let params: Vec<_> = {
        // Rebuild handles against the zeroed store by name.
        let mut fresh = ParamStore::new();
        let p = interaction_layers(&mut fresh, d, 2, true, &mut rng);
        fresh.load_from(&store).unwrap();
        store = fresh;
        p
    };
    let mut s = Session::new(&store);
    let layers: Vec<_> = params.iter().map(|p| p.bind(&mut s)).collect();
    let g = &mut s.graph;
    let qh = query_set(g, Role::Human, random_normal(&[2, d], 1.0, &mut rng));
    let qa = query_set(g, Role::Action, random_normal(&[3, d], 1.0, &mut rng));
    let qo = query_set(g, Role::Object, random_normal(&[2, d], 1.0, &mut rng));
    let mem = g.constant(random_normal(&[5, d], 1.0, &mut rng));
    let x = random_normal(&[2, 2, d], 1.0, &mut rng);
    let x0 = g.constant(x.clone());
    let input = ReasonerInput::Triplet { human: &qh, action: &qa, object: &qo, mode: PairStateInTerms::Mean };
    let y = interaction_decoder(g, mem, input, x0, &layers).unwrap();
    assert!(g.value(y.pairs.embeddings).max_abs_diff(&x) < 1e-15);
}

/// Scalar loss on the decoder output as a function of `[qh, qa, qo, memory]`.
fn decoder_loss<'a>(
    layers: &'a [InteractionLayer],
    src: &'a Graph,
    target: &'a Tensor,
    triplet: bool,
) -> impl Fn(&mut Graph, &[Var]) -> hoi_core::Result<Var> + 'a {
    move |g, v| {
        let qh = QuerySet { role: Role::Human, embeddings: v[0], scores: v[0] };
        let qa = QuerySet { role: Role::Action, embeddings: v[1], scores: v[1] };
        let qo = QuerySet { role: Role::Object, embeddings: v[2], scores: v[2] };
        let (nh, no, d) = (g.shape(v[0])[0], g.shape(v[2])[0], g.shape(v[0])[1]);
        let x0 = g.constant(Tensor::zeros(&[nh, no, d]));
        // Layer weights are constants copied into this graph.
        let rebound: Vec<InteractionLayer> = layers.iter().map(|l| rebind(g, l, src)).collect();
        let input = if triplet {
            ReasonerInput::Triplet { human: &qh, action: &qa, object: &qo, mode: PairStateInTerms::Mean }
        } else {
            let h = g.unsqueeze(v[0], 1)?;
            let o = g.unsqueeze(v[2], 0)?;
            let pq = g.add(h, o)?;
            ReasonerInput::Pairwise { pair_queries: pq }
        };
        let y = interaction_decoder(g, v[3], input, x0, &rebound)?;
        let t = g.constant(target.clone());
        let t = g.reshape(t, &[1, 1, d])?;
        let p = g.mul(y.pairs.embeddings, t)?;
        let sq = g.mul(p, p)?;
        let a = g.sum_all(p);
        let b = g.mean_all(sq);
        g.add(a, b)
    }
}

/// Re-creates layer handles in `g`, copying the values bound in `src`.
fn rebind(g: &mut Graph, l: &InteractionLayer, src: &Graph) -> InteractionLayer {
    let mut c = |v: Var| g.constant(src.value(v).clone());
    let ln = |c: &mut dyn FnMut(Var) -> Var, n: hoi_core::nn::LayerNorm| hoi_core::nn::LayerNorm { gamma: c(n.gamma), beta: c(n.beta) };
    let lin = |c: &mut dyn FnMut(Var) -> Var, n: hoi_core::nn::Linear| hoi_core::nn::Linear { weight: c(n.weight), bias: n.bias.map(|b| c(b)) };
    let att = |c: &mut dyn FnMut(Var) -> Var, a: AttentionWeights| AttentionWeights { query: c(a.query), key: c(a.key), value: c(a.value), out: c(a.out) };
    InteractionLayer {
        norm_pair: ln(&mut c, l.norm_pair),
        reasoning: match l.reasoning {
            Reasoning::Triplet(t) => Reasoning::Triplet(TripletWeights {
                query: c(t.query),
                key: c(t.key),
                value_human: c(t.value_human),
                value_object: c(t.value_object),
                out: c(t.out),
            }),
            Reasoning::Pairwise(a) => Reasoning::Pairwise(att(&mut c, a)),
        },
        norm_cross: ln(&mut c, l.norm_cross),
        cross: att(&mut c, l.cross),
        norm_ffn: ln(&mut c, l.norm_ffn),
        ffn: hoi_core::nn::FeedForward { up: lin(&mut c, l.ffn.up), down: lin(&mut c, l.ffn.down) },
    }
}

fn grad_check_decoder(triplet: bool, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let d = 4;
    let mut store = ParamStore::new();
    let params = interaction_layers(&mut store, d, 2, triplet, &mut rng);
    // Perturb the norms so the check is not at the identity affine map.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get(id).clone();
        let noise = random_normal(t.shape(), 0.2, &mut rng);
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect()).unwrap();
        store.set(id, v).unwrap();
    }
    let mut s = Session::new(&store);
    let layers: Vec<_> = params.iter().map(|p| p.bind(&mut s)).collect();
    let target = random_normal(&[d], 1.0, &mut rng);
    let inputs = [
        random_normal(&[2, d], 1.0, &mut rng),
        random_normal(&[2, d], 1.0, &mut rng),
        random_normal(&[2, d], 1.0, &mut rng),
        random_normal(&[3, d], 1.0, &mut rng),
    ];
    let f = decoder_loss(&layers, &s.graph, &target, triplet);
    let r = grad_check_many(f, &inputs, 1e-5).unwrap();
    assert!(r.checked > 0);
    r.max_rel_error
}

#[test]
fn triplet_interaction_decoder_grad_check() {
    for seed in 0..3 {
        let e = grad_check_decoder(true, 200 + seed);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn pairwise_interaction_decoder_grad_check() {
    let e = grad_check_decoder(false, 210);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn mean_and_omit_modes_differ_only_through_pair_state() {
    let mut rng = seeded_rng(113);
    let d = 4;
    let mut g = Graph::new();
    let w = triplet_weights(&mut g, d, &mut rng);
    let x = g.constant(Tensor::zeros(&[2, 3, d]));
    let qh = g.constant(random_normal(&[2, d], 1.0, &mut rng));
    let qa = g.constant(random_normal(&[4, d], 1.0, &mut rng));
    let qo = g.constant(random_normal(&[3, d], 1.0, &mut rng));
    let a = build_triplet_qkv(&mut g, x, qh, qa, qo, &w, PairStateInTerms::Mean).unwrap();
    let b = build_triplet_qkv(&mut g, x, qh, qa, qo, &w, PairStateInTerms::Omit).unwrap();
    for (u, v) in [(a.query, b.query), (a.key, b.key), (a.value, b.value)] {
        assert!(g.value(u).max_abs_diff(g.value(v)) < 1e-15);
    }
}
