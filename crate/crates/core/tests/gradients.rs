mod common;

use common::{jitter_params, rand_mat, rng, Probe};
use stamp::backbone::Block;
use stamp::decoder::DecoderBlock;
use stamp::eval::{attention_pool, Pool, PoolHead};
use stamp::nn::ParamStore;
use stamp::temporal::TemporalEncoder;

const TOL: f64 = 1e-4;

#[test]
fn encoder_block_matches_finite_differences() {
    let mut store = ParamStore::new();
    let block = Block::new(&mut store, "b", 8, 2, 2, &mut rng(1));
    jitter_params(&mut store, 2);
    let x = rand_mat(5, 8, 1.0, &mut rng(3));
    let p = Probe::new(|t, s, x| block.forward(t, s, x).0, &store, &x, 4);
    let (e, at) = p.max_rel_err(&store, &x);
    assert!(e < TOL, "relative error {e} at {at}");
}

#[test]
fn decoder_block_matches_finite_differences() {
    let mut store = ParamStore::new();
    let block = DecoderBlock::new(&mut store, "d", 8, 2, 2, true, &mut rng(5));
    jitter_params(&mut store, 6);
    let kv = rand_mat(4, 8, 1.0, &mut rng(7));
    let x = rand_mat(3, 8, 1.0, &mut rng(8));
    // the probe input is the query stream; keys/values enter as a second input
    let p = Probe::new(
        |t, s, x| {
            let k = t.input(kv.clone());
            block.forward(t, s, x, Some(k)).unwrap()
        },
        &store,
        &x,
        9,
    );
    let (e, at) = p.max_rel_err(&store, &x);
    assert!(e < TOL, "relative error {e} at {at}");

    // gradient w.r.t. the key/value stream
    let p = Probe::new(
        |t, s, k| {
            let q = t.input(x.clone());
            block.forward(t, s, q, Some(k)).unwrap()
        },
        &store,
        &kv,
        10,
    );
    let (e, at) = p.max_rel_err(&store, &kv);
    assert!(e < TOL, "relative error {e} at {at}");
}

#[test]
fn temporal_mlp_matches_finite_differences() {
    let mut store = ParamStore::new();
    let te = TemporalEncoder::new(&mut store, "te", 8, &mut rng(11)).unwrap();
    jitter_params(&mut store, 12);
    // Δt is a scalar constant; the probe input is added to the output so the
    // helper has something to perturb
    let x = rand_mat(1, 8, 1.0, &mut rng(13));
    for dt in [0.0, 3.0, 17.5] {
        let p = Probe::new(
            |t, s, x| {
                let e = te.forward(t, s, dt);
                t.mul(e, x)
            },
            &store,
            &x,
            14,
        );
        let (e, at) = p.max_rel_err(&store, &x);
        assert!(e < TOL, "dt {dt}: relative error {e} at {at}");
    }
}

#[test]
fn attention_pool_matches_finite_differences() {
    let mut store = ParamStore::new();
    let head = PoolHead::new(&mut store, Pool::Attention, 8, 2, &mut rng(15)).unwrap();
    jitter_params(&mut store, 16);
    let x = rand_mat(5, 8, 1.0, &mut rng(17));
    let p = Probe::new(
        |t, s, x| {
            let pooled = attention_pool(t, s, &head, x).unwrap();
            let logit = head.head.forward(t, s, pooled);
            t.concat_cols(&[pooled, logit])
        },
        &store,
        &x,
        18,
    );
    let (e, at) = p.max_rel_err(&store, &x);
    assert!(e < TOL, "relative error {e} at {at}");
}
