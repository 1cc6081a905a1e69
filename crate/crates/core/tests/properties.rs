//! Property tests for the invariants of each module.

use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use traffic_lm::alt::{rwkv_weights, RwkvParams};
use traffic_lm::attention::{local_attention, vaswani_attention, AttentionInputs, EluPlusOne, FeatureMap};
use traffic_lm::classify::{decode_label, encode_label, macro_f1, MASKED_TARGET};
use traffic_lm::codec::{
    decode_interval, detokenize_flow, encode_interval, tokenize_flow, validate_token_grammar, TokenId, PACKET_OVERHEAD,
};
use traffic_lm::flow::{anonymize, split_flows, AnonymizePolicy, Endpoint, FlowKey};
use traffic_lm::generate::{flow_rng, generate_flow, GenerationConfig, ScriptedModel};
use traffic_lm::lm::layers::cross_entropy_sum;
use traffic_lm::lm::{checkpoint, Model, ModelConfig};
use traffic_lm::metrics::{cdf_points, features_from_directions, jsd, CategoricalDistribution};
use traffic_lm::packet::Transport;
use traffic_lm::pcap::{read_pcap, write_pcap_to_vec, Direction, PacketRecord, Timestamp};
use traffic_lm::synth::fixture_corpus;
use traffic_lm::Matrix64;

fn distribution() -> impl Strategy<Value = Vec<(u8, f64)>> {
    prop::collection::btree_map(any::<u8>(), 1u32..1000, 1..12).prop_map(|m: BTreeMap<u8, u32>| {
        let total: u32 = m.values().sum();
        m.into_iter().map(|(k, c)| (k, f64::from(c) / f64::from(total))).collect()
    })
}

/// `0.5 KL(p||m) + 0.5 KL(q||m)` in bits over the union of supports.
fn jsd_brute(p: &[(u8, f64)], q: &[(u8, f64)]) -> f64 {
    let mut keys: Vec<u8> = p.iter().chain(q).map(|x| x.0).collect();
    keys.sort_unstable();
    keys.dedup();
    let get = |d: &[(u8, f64)], k: u8| d.iter().find(|x| x.0 == k).map_or(0.0, |x| x.1);
    let mut total = 0.0;
    for k in keys {
        let (a, b) = (get(p, k), get(q, k));
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            total += 0.5 * b * (b / m).log2();
        }
    }
    total
}

fn matrix(rows: usize, cols: usize, data: &[f64]) -> Matrix64 {
    Matrix64::from_fn(rows, cols, |r, c| data[(r * cols + c) % data.len()])
}

fn directions() -> impl Strategy<Value = Vec<Direction>> {
    prop::collection::vec(any::<bool>().prop_map(|o| if o { Direction::Outgoing } else { Direction::Incoming }), 1..120)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn jsd_is_symmetric_bounded_and_matches_definition(p in distribution(), q in distribution()) {
        let (dp, dq) = (CategoricalDistribution::new(p.clone()).unwrap(), CategoricalDistribution::new(q.clone()).unwrap());
        let forward = jsd(&dp, &dq);
        prop_assert_eq!(forward, jsd(&dq, &dp));
        prop_assert_eq!(jsd(&dp, &dp), 0.0);
        prop_assert!((0.0..=1.0).contains(&forward));
        prop_assert!((forward - jsd_brute(&p, &q)).abs() <= 1e-12);
    }

    #[test]
    fn flow_feature_shares_and_counts_add_up(d in directions()) {
        let f = features_from_directions(&d).unwrap();
        prop_assert!((f.f2 + f.f3 - 1.0).abs() <= 1e-15);
        prop_assert_eq!(f.f1 + f.f5, d.len() as f64);
        prop_assert!(f.f4 >= 0.0 && (0.0..=1.0).contains(&f.f2));
    }

    #[test]
    fn cdf_is_monotone_and_ends_at_one(xs in prop::collection::vec(-1e6f64..1e6, 1..200)) {
        let pts = cdf_points(&xs).unwrap();
        prop_assert!(pts.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
        prop_assert_eq!(pts.last().unwrap().1, 1.0);
    }

    #[test]
    fn macro_f1_ignores_pair_order(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60), seed in any::<u64>()) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let mut shuffled = pairs.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (sp, sl): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
        let a = macro_f1(&preds, &labels).unwrap();
        let b = macro_f1(&sp, &sl).unwrap();
        prop_assert!((a.macro_f1 - b.macro_f1).abs() <= 1e-15);
        prop_assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn label_codec_round_trips(width in 1usize..=3, raw in any::<u64>()) {
        let cap = 260usize.pow(width as u32);
        let i = (raw as usize) % cap;
        let code = encode_label(i, width).unwrap();
        prop_assert!(code.ids.iter().all(|&d| d < 260));
        prop_assert_eq!(decode_label(&code).unwrap(), i);
        prop_assert!(encode_label(cap + (raw as usize % 7), width).is_err());
    }

    #[test]
    fn interval_codec_is_exact(bits in any::<u64>()) {
        let x = f64::from_bits(bits & !(1 << 63));
        prop_assume!(x.is_finite());
        prop_assert_eq!(decode_interval(encode_interval(x).unwrap()).to_bits(), x.to_bits());
    }

    #[test]
    fn codec_round_trips_random_flows(seed in any::<u64>(), max_packets in 1usize..40) {
        for flow in fixture_corpus(3, max_packets, seed) {
            let ids = tokenize_flow(&flow).unwrap().0;
            prop_assert!(validate_token_grammar(&ids).is_ok());
            let frames: usize = flow.packets.iter().map(|p| PACKET_OVERHEAD + p.bytes.len()).sum();
            prop_assert_eq!(ids.len(), 1 + frames);
            let back = detokenize_flow(&ids, flow.packets[0].timestamp, None).unwrap();
            prop_assert_eq!(back.packets, flow.packets);
        }
    }

    #[test]
    fn pcap_round_trip_is_a_fixed_point(frames in prop::collection::vec((0u64..u64::from(u32::MAX) * 1_000_000, prop::collection::vec(any::<u8>(), 1..200)), 0..30)) {
        let mut recs: Vec<PacketRecord> = frames.into_iter().map(|(t, b)| PacketRecord::new(Timestamp::from_micros(t), 1, b)).collect();
        recs.sort_by_key(|r| r.timestamp);
        let first = read_pcap(&write_pcap_to_vec(1, &recs).unwrap()[..]).unwrap();
        let second = read_pcap(&write_pcap_to_vec(first.linktype, &first.records).unwrap()[..]).unwrap();
        prop_assert_eq!(&first, &second);
        prop_assert_eq!(first.records.len(), recs.len());
    }

    #[test]
    fn split_flows_partitions_its_input(seed in any::<u64>(), junk in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..40), 0..10)) {
        let mut recs: Vec<PacketRecord> = fixture_corpus(6, 15, seed)
            .into_iter()
            .filter(|f| f.packets[0].linktype == 1)
            .flat_map(|f| f.packets)
            .collect();
        recs.extend(junk.into_iter().map(|b| PacketRecord::new(Timestamp::from_micros(0), 1, b)));
        let n = recs.len();
        let split = split_flows(recs);
        prop_assert_eq!(split.flows.iter().map(|f| f.packets.len()).sum::<usize>() + split.dropped, n);
    }

    #[test]
    fn flow_key_ignores_endpoint_order(a in any::<[u8; 4]>(), b in any::<[u8; 4]>(), pa in any::<u16>(), pb in any::<u16>(), tcp in any::<bool>()) {
        let t = if tcp { Transport::Tcp } else { Transport::Udp };
        let ea = Endpoint { addr: IpAddr::V4(Ipv4Addr::from(a)), port: pa };
        let eb = Endpoint { addr: IpAddr::V4(Ipv4Addr::from(b)), port: pb };
        prop_assert_eq!(FlowKey::new(ea, eb, t), FlowKey::new(eb, ea, t));
    }

    #[test]
    fn anonymize_is_idempotent_and_length_preserving(seed in any::<u64>(), mac in any::<bool>(), ip in any::<bool>(), ports in any::<bool>()) {
        let policy = AnonymizePolicy { mac, ip, ports };
        for flow in fixture_corpus(3, 10, seed) {
            let once = anonymize(flow.clone(), policy).unwrap();
            prop_assert!(once.packets.iter().zip(&flow.packets).all(|(a, b)| a.bytes.len() == b.bytes.len()));
            let twice = anonymize(once.clone(), policy).unwrap();
            prop_assert_eq!(twice.packets, once.packets);
        }
    }

    #[test]
    fn feature_map_is_positive(x in -700f64..700.0) {
        prop_assert!(FeatureMap::<f64>::apply(&EluPlusOne, x) > 0.0);
    }

    #[test]
    fn softmax_rows_stay_in_the_convex_hull(n in 1usize..12, d in 1usize..6, data in prop::collection::vec(-3f64..3.0, 8..64), window in 1usize..5) {
        let (q, k, v) = (matrix(n, d, &data), matrix(n, d, &data[3..]), matrix(n, d, &data[5..]));
        let inputs = AttentionInputs::new(&q, &k, &v, true);
        for (out, w) in [(vaswani_attention(&inputs).unwrap(), n), (local_attention(&inputs, window).unwrap(), window)] {
            for i in 0..n {
                for c in 0..d {
                    let rows = i + 1 - (i + 1).min(w)..=i;
                    let lo = rows.clone().map(|j| v[(j, c)]).fold(f64::INFINITY, f64::min);
                    let hi = rows.map(|j| v[(j, c)]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(out[(i, c)] >= lo - 1e-9 && out[(i, c)] <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn rwkv_weights_are_convex(n in 1usize..20, d in 1usize..5, data in prop::collection::vec(-4f64..4.0, 8..40), w in prop::collection::vec(0f64..3.0, 5), causal in any::<bool>()) {
        let k = matrix(n, d, &data);
        let params = RwkvParams::new(w[..d].to_vec()).unwrap();
        for i in 0..n {
            let m = rwkv_weights(&k, &params, causal, i).unwrap();
            for c in 0..d {
                let col: Vec<f64> = (0..m.rows()).map(|j| m[(j, c)]).collect();
                prop_assert!(col.iter().all(|&x| x >= 0.0));
                prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn masked_positions_get_no_logit_gradient(rows in 1usize..10, data in prop::collection::vec(-5f64..5.0, 16..64), targets in prop::collection::vec(prop::option::of(0u16..260), 10)) {
        let logits = matrix(rows, 260, &data);
        let t: Vec<TokenId> = targets[..rows].iter().map(|x| x.unwrap_or(MASKED_TARGET)).collect();
        if let Ok((_, _, Some(g))) = cross_entropy_sum(&logits, &t, Some(MASKED_TARGET), true) {
            for (r, &y) in t.iter().enumerate() {
                if y == MASKED_TARGET {
                    prop_assert!(g.row(r).iter().all(|&x| x == 0.0));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_round_trip_is_bit_identical(seed in any::<u64>(), ids in prop::collection::vec(0u16..260, 1..16)) {
        let model = Model::<f64>::new(ModelConfig::tiny(8, 2, 16), seed).unwrap();
        let mut buf = Vec::new();
        checkpoint::write_checkpoint(&mut buf, &model, 3, seed).unwrap();
        let (back, _) = checkpoint::read_checkpoint::<f64, _>(&buf[..]).unwrap();
        prop_assert_eq!(back.forward(&ids).unwrap(), model.forward(&ids).unwrap());
    }

    #[test]
    fn generation_is_seed_deterministic_and_windowed(seed in any::<u64>(), index in 0u64..1000, window in 8usize..40) {
        let model = Model::<f64>::new(ModelConfig::tiny(8, 1, window), 3).unwrap();
        let cfg = GenerationConfig { max_tokens_total: 120, seed, ..GenerationConfig::default() };
        let run = || {
            let mut lm = traffic_lm::generate::CachedLm::new(&model);
            let out = generate_flow(&mut lm, &[], &cfg, &mut flow_rng(seed, index)).map(|(s, t)| (s.0, t.restarts));
            (format!("{out:?}"), lm.max_context_seen)
        };
        let (a, seen) = run();
        prop_assert_eq!(&a, &run().0);
        prop_assert!(seen < window);
        let mut scripted = ScriptedModel::new(vec![256; 200], window);
        let _ = generate_flow(&mut scripted, &[], &cfg, &mut flow_rng(seed, index));
        prop_assert!(scripted.max_context_seen < window);
    }
}
