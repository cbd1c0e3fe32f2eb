use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tracksearch::space::*;

fn genes_strategy() -> impl Strategy<Value = Genome> {
    let per_gene: Vec<_> = (0..GENE_COUNT).map(|p| 0..full_choice_count(p) as u32).collect();
    per_gene.prop_map(|v| Genome::from_genes(&v.try_into().unwrap()))
}

proptest! {
    #[test]
    fn encode_decode_roundtrip(g in genes_strategy()) {
        let text = g.encode();
        prop_assert_eq!(Genome::decode(&text).unwrap(), g.clone());
        prop_assert!(validate(&g).is_ok());
        prop_assert!(SpaceDescriptor::full().contains(&g));
    }

    #[test]
    fn ordering_follows_encoding(a in genes_strategy(), b in genes_strategy()) {
        prop_assert_eq!(a.cmp(&b), a.encode().cmp(&b.encode()));
    }

    #[test]
    fn gene_vector_roundtrip(g in genes_strategy()) {
        prop_assert_eq!(Genome::from_genes(&g.genes()), g);
    }
}

#[test]
fn cardinalities_from_first_principles() {
    let s = describe_space(&SpaceDescriptor::full());
    let backbone = 6u128.pow(14);
    let branch = 3 * 2 * 3u128.pow(7);
    assert_eq!(s.backbone_cardinality, 78_364_164_096);
    assert_eq!(s.backbone_cardinality, backbone);
    assert_eq!(s.head_branch_cardinality, [branch, branch]);
    assert_eq!(s.head_cardinality, 172_186_884);
    assert_eq!(s.head_cardinality_eight_layer_count, (3 * 3u128.pow(8)).pow(2));
    assert_eq!(s.total_cardinality, backbone * 8 * branch * branch);
}

#[test]
fn reduced_space_enumeration_matches_cardinality() {
    let space = SpaceDescriptor::singleton(&random_genome(3))
        .unwrap()
        .restrict(2, &[0, 4, 5])
        .unwrap()
        .restrict(OUTPUT_LAYER_GENE, &[1, 6])
        .unwrap()
        .restrict(REG_GENES + 4, &[0, 1, 2])
        .unwrap();
    let all: Vec<_> = space.iter().collect();
    assert_eq!(all.len() as u128, space.cardinality());
    assert_eq!(all.len(), 18);
    let mut sorted = all.clone();
    sorted.dedup();
    assert_eq!(sorted.len(), 18);
    assert!(all.iter().all(|g| space.contains(g)));
}

#[test]
fn per_gene_frequencies_pass_chi_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let space = SpaceDescriptor::full();
    let n = 10_000;
    let mut counts: Vec<Vec<u64>> = (0..GENE_COUNT).map(|p| vec![0; full_choice_count(p)]).collect();
    for _ in 0..n {
        for (p, &v) in space.sample(&mut rng).genes().iter().enumerate() {
            counts[p][v as usize] += 1;
        }
    }
    for (p, c) in counts.iter().enumerate() {
        let k = c.len() as f64;
        let expected = n as f64 / k;
        let stat: f64 = c.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        let pval = 1.0 - ChiSquared::new(k - 1.0).unwrap().cdf(stat);
        assert!(pval > 0.001, "{}: chi2 {stat:.2}, p = {pval:.2e}", gene_name(p));
    }
}

#[test]
fn space_file_roundtrip_through_json() {
    let space = SpaceDescriptor::full().restrict(CLS_GENES + 3, &[2]).unwrap();
    let file = SpaceFile::from(&space);
    let text = serde_json::to_string(&file).unwrap();
    let back: SpaceFile = serde_json::from_str(&text).unwrap();
    assert_eq!(SpaceDescriptor::try_from(back).unwrap(), space);
    assert_ne!(space.fingerprint(), SpaceDescriptor::full().fingerprint());
}
