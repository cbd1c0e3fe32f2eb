use proptest::prelude::*;
use tracksearch::cost::*;
use tracksearch::space::*;
use tracksearch::supernet::WeightStore;
use tracksearch::tensor::instrumented_macs;

/// Hand-written reference counter: (channels out, stride) per backbone block.
const BLOCKS: [(u64, u64); 14] = [
    (24, 2), (24, 1),
    (40, 2), (40, 1), (40, 1), (40, 1),
    (80, 2), (80, 1), (80, 1), (80, 1),
    (96, 1), (96, 1), (96, 1), (96, 1),
];

fn reference_backbone(g: &Genome, input: u64) -> (u64, u64, u64) {
    let mut h = input / 2;
    let mut macs = h * h * 16 * 27;
    let mut params = 27 * 16 + 32;
    macs += h * h * 16 * 9 + h * h * 16 * 16;
    params += 9 * 16 + 32 + 16 * 16 + 32;
    let mut cin = 16u64;
    for (i, &gene) in g.backbone.iter().enumerate().take(g.output_layer as usize + 7) {
        let k = [3u64, 5, 7][gene as usize / 2];
        let e = [4u64, 6][gene as usize % 2];
        let (cout, s) = BLOCKS[i];
        let ce = cin * e;
        let cr = ce / 4;
        let ho = h / s;
        macs += h * h * cin * ce + ho * ho * ce * k * k + 2 * ce * cr + ho * ho * ce + ho * ho * ce * cout;
        params += cin * ce + 2 * ce + k * k * ce + 2 * ce + 2 * ce * cr + cr + ce + ce * cout + 2 * cout;
        h = ho;
        cin = cout;
    }
    macs += h * h * cin * 128;
    params += cin * 128 + 256;
    (macs, params, h)
}

fn reference_cost(g: &Genome) -> (u64, u64) {
    let (ms, ps, hs) = reference_backbone(g, 256);
    let (me, _, he) = reference_backbone(g, 112);
    assert_eq!((hs, he), (16, 7));
    let mut macs = ms + me + 256 * 128 * 49;
    let mut params = ps;
    for (b, outs) in [(&g.cls, 1u64), (&g.reg, 4)] {
        let c = [128u64, 192, 256][b.channels as usize];
        let k = [3u64, 5][b.first_kernel as usize];
        macs += 256 * 128 * k * k + 256 * 128 * c;
        params += 128 * k * k + 256 + 128 * c + 2 * c;
        for l in &b.layers {
            if let Some(k) = l.kernel() {
                let k = k as u64;
                macs += 256 * c * k * k + 256 * c * c;
                params += c * k * k + 2 * c + c * c + 2 * c;
            }
        }
        macs += 256 * 9 * c * outs;
        params += 9 * c * outs + outs;
    }
    (macs, params)
}

fn genes_strategy() -> impl Strategy<Value = Genome> {
    let per_gene: Vec<_> = (0..GENE_COUNT).map(|p| 0..full_choice_count(p) as u32).collect();
    per_gene.prop_map(|v| Genome::from_genes(&v.try_into().unwrap()))
}

proptest! {
    #[test]
    fn matches_reference_counter(g in genes_strategy()) {
        let c = genome_cost(&g).unwrap();
        prop_assert_eq!((c.macs, c.params), reference_cost(&g));
    }

    #[test]
    fn additive_over_realized_ops(g in genes_strategy()) {
        let total: Cost = realized_ops(&g).iter().map(|op| op.cost().unwrap()).sum();
        prop_assert_eq!(total, genome_cost(&g).unwrap());
        let report = cost_report(&g).unwrap();
        prop_assert_eq!(report.per_layer.iter().map(|l| l.macs).sum::<u64>(), report.macs);
    }

    #[test]
    fn single_gene_upgrades_never_decrease_cost(g in genes_strategy(), pos in 0..GENE_COUNT) {
        let genes = g.genes();
        let base = genome_cost(&g).unwrap();
        let upgrades: Vec<u32> = if pos < BACKBONE_LAYERS {
            let c = BackboneChoice::from_index(genes[pos]).unwrap();
            BackboneChoice::all()
                .filter(|o| o.kernel >= c.kernel && o.expansion >= c.expansion)
                .map(|o| o.index())
                .collect()
        } else if pos == OUTPUT_LAYER_GENE || pos == CLS_GENES || pos == REG_GENES
            || pos == CLS_GENES + 1 || pos == REG_GENES + 1 {
            (genes[pos]..full_choice_count(pos) as u32).collect()
        } else {
            let l = HeadLayer::from_index(genes[pos]).unwrap();
            match l {
                HeadLayer::Skip => vec![0, 1, 2],
                HeadLayer::K3 => vec![0, 1],
                HeadLayer::K5 => vec![1],
            }
        };
        for v in upgrades {
            let mut up = genes;
            up[pos] = v;
            let c = genome_cost(&Genome::from_genes(&up)).unwrap();
            prop_assert!(c.macs >= base.macs && c.params >= base.params);
        }
    }
}

#[test]
fn extrema_bound_random_genomes() {
    let (lo, hi) = space_extrema(&SpaceDescriptor::full());
    for s in 0..1000 {
        let c = genome_cost(&random_genome(s)).unwrap();
        assert!(lo.macs <= c.macs && c.macs <= hi.macs);
        assert!(lo.params <= c.params && c.params <= hi.params);
    }
    assert_eq!(reference_cost(&minimal_genome()), (lo.macs, lo.params));
    assert_eq!(reference_cost(&maximal_genome()), (hi.macs, hi.params));
}

fn brute_extrema(space: &SpaceDescriptor) -> (Cost, Cost) {
    let costs: Vec<Cost> = space.iter().map(|g| genome_cost(&g).unwrap()).collect();
    (
        Cost::new(costs.iter().map(|c| c.macs).min().unwrap(), costs.iter().map(|c| c.params).min().unwrap()),
        Cost::new(costs.iter().map(|c| c.macs).max().unwrap(), costs.iter().map(|c| c.params).max().unwrap()),
    )
}

#[test]
fn reduced_extrema_match_enumeration() {
    let spaces = [
        SpaceDescriptor::singleton(&random_genome(1))
            .unwrap()
            .restrict(0, &[0, 5])
            .unwrap()
            .restrict(9, &[1, 2, 3])
            .unwrap()
            .restrict(OUTPUT_LAYER_GENE, &[0, 3, 7])
            .unwrap()
            .restrict(CLS_GENES, &[0, 2])
            .unwrap()
            .restrict(REG_GENES + 5, &[0, 1, 2])
            .unwrap()
            .restrict(CLS_GENES + 1, &[0, 1])
            .unwrap(),
        SpaceDescriptor::singleton(&random_genome(2))
            .unwrap()
            .restrict(13, &[0, 1, 2, 3, 4, 5])
            .unwrap()
            .restrict(OUTPUT_LAYER_GENE, &[0, 1, 2, 3, 4, 5, 6, 7])
            .unwrap()
            .restrict(REG_GENES, &[0, 1, 2])
            .unwrap()
            .restrict(CLS_GENES + 2, &[0, 1, 2])
            .unwrap()
            .restrict(CLS_GENES + 8, &[0, 1, 2])
            .unwrap(),
    ];
    for space in spaces {
        assert!(space.cardinality() <= 4096);
        assert_eq!(space_extrema(&space), brute_extrema(&space));
    }
}

#[test]
fn instrumented_macs_equal_analytic() {
    let store = WeightStore::init(&SpaceDescriptor::full(), 7);
    let mut genomes: Vec<Genome> = (0..6).map(|s| random_genome(1000 + s)).collect();
    genomes.push(minimal_genome());
    for g in genomes {
        let view = store.path_view(&g).unwrap();
        assert_eq!(instrumented_macs(&view).unwrap(), genome_cost(&g).unwrap().macs, "{}", g.encode());
    }
}

#[test]
fn maximal_genome_is_infeasible_on_mobile() {
    assert!(!feasible(&maximal_genome(), &Budget::MOBILE));
    assert!(feasible(&maximal_genome(), &Budget::unlimited()));
}
