mod common;

use common::rng;
use fedbm::concept::ConceptEmbeddingSet;
use fedbm::data::dirichlet_partition;
use fedbm::federation::{aggregate, sample_clients};
use fedbm::nn::{checkpoint, FeatureExtractor, Layout, ParameterVector, Parameterized, Segment};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn vectors(n: usize, len: usize) -> impl Strategy<Value = Vec<ParameterVector>> {
    prop::collection::vec(
        (
            prop::collection::vec(-1e3f64..1e3, len),
            prop::collection::vec(0f64..1e3, 2),
        ),
        1..=n,
    )
    .prop_map(move |vs| {
        let layout = Layout {
            params: vec![Segment {
                name: "w".into(),
                len,
            }],
            buffers: vec![Segment {
                name: "r".into(),
                len: 2,
            }],
        };
        vs.into_iter()
            .map(|(p, b)| ParameterVector::new(layout.clone(), p, b).unwrap())
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_conserves_indices(
        classes in 2usize..6,
        per_class in 5usize..40,
        clients in 1usize..6,
        beta in 0.1f64..10.0,
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
        let plan = dirichlet_partition(&labels, clients, beta, &mut rng(seed)).unwrap();
        prop_assert_eq!(plan.clients.len(), clients);
        let mut all: Vec<usize> = plan.clients.concat();
        for c in &plan.clients {
            prop_assert!(!c.is_empty());
            prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
        }
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
    }

    #[test]
    fn aggregate_ignores_order(vs in vectors(6, 12), seed in any::<u64>()) {
        let mut shuffled = vs.clone();
        shuffled.shuffle(&mut rng(seed));
        prop_assert_eq!(aggregate(&vs).unwrap().to_bits(), aggregate(&shuffled).unwrap().to_bits());
    }

    #[test]
    fn aggregate_stays_within_coordinate_range(vs in vectors(6, 12)) {
        let mean = aggregate(&vs).unwrap();
        for (i, m) in mean.params.iter().enumerate() {
            let lo = vs.iter().map(|v| v.params[i]).fold(f64::INFINITY, f64::min);
            let hi = vs.iter().map(|v| v.params[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*m >= lo - 1e-9 && *m <= hi + 1e-9);
        }
    }

    #[test]
    fn flatten_load_round_trip(input in 1usize..10, embed in 1usize..10, a in any::<u64>(), b in any::<u64>()) {
        let source = FeatureExtractor::new(input, embed, &mut rng(a));
        let mut target = FeatureExtractor::new(input, embed, &mut rng(b));
        let v = source.flatten();
        target.load(&v).unwrap();
        prop_assert_eq!(target.flatten().to_bits(), v.to_bits());
    }

    #[test]
    fn checkpoint_round_trip(vs in vectors(1, 20)) {
        let v = &vs[0];
        prop_assert_eq!(checkpoint::decode(&checkpoint::encode(v)).unwrap().to_bits(), v.to_bits());
    }

    #[test]
    fn ceb1_round_trip(
        k in 1usize..5,
        m in 2usize..5,
        d in 1usize..6,
        seed in any::<u64>(),
        names in prop::collection::vec("[a-zA-Z ]{0,12}", 5),
    ) {
        let mut r = rng(seed);
        let values: Vec<Vec<Vec<f64>>> = (0..k)
            .map(|_| (0..m).map(|_| (0..d).map(|_| common::normal(&mut r) as f32 as f64).collect()).collect())
            .collect();
        let set = ConceptEmbeddingSet::new(names[..k].to_vec(), values).unwrap();
        let back = ConceptEmbeddingSet::from_ceb1(&set.to_ceb1()).unwrap();
        prop_assert_eq!(back.class_names(), set.class_names());
        prop_assert_eq!(back.values(), set.values());
    }

    #[test]
    fn sampled_clients_are_distinct_and_sorted(clients in 1usize..40, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let ids = sample_clients(clients, ratio, &mut rng(seed));
        let expected = ((ratio * clients as f64).ceil() as usize).clamp(1, clients);
        prop_assert_eq!(ids.len(), expected);
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ids.iter().all(|&c| c < clients));
    }
}

#[test]
fn ceb1_rejects_bad_magic_and_truncation() {
    let set = ConceptEmbeddingSet::new(
        vec!["a".into(), "b".into()],
        vec![vec![vec![1.0, 2.0]; 2]; 2],
    )
    .unwrap();
    let bytes = set.to_ceb1();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(ConceptEmbeddingSet::from_ceb1(&bad).is_err());
    assert!(ConceptEmbeddingSet::from_ceb1(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(ConceptEmbeddingSet::from_ceb1(&extra).is_err());
    assert!(ConceptEmbeddingSet::new(vec!["a".into()], vec![vec![vec![1.0]]]).is_err());
    let mut single = b"CEB1".to_vec();
    for n in [1u32, 1, 1, 1] {
        single.extend_from_slice(&n.to_le_bytes());
    }
    single.push(b'a');
    single.extend_from_slice(&1.0f32.to_le_bytes());
    assert!(ConceptEmbeddingSet::from_ceb1(&single).is_err());
}

#[test]
fn ceb1_layout_is_little_endian() {
    let set =
        ConceptEmbeddingSet::new(vec!["ab".into()], vec![vec![vec![1.5], vec![-2.0]]]).unwrap();
    let bytes = set.to_ceb1();
    let mut want = b"CEB1".to_vec();
    for n in [1u32, 2, 1, 2] {
        want.extend_from_slice(&n.to_le_bytes());
    }
    want.extend_from_slice(b"ab");
    want.extend_from_slice(&1.5f32.to_le_bytes());
    want.extend_from_slice(&(-2.0f32).to_le_bytes());
    assert_eq!(bytes, want);
}
