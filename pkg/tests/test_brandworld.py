import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuron_auctions import brandworld
from neuron_auctions.brandworld import WorldConfig, cloze_instances, count_occurrences, make_world
from neuron_auctions.errors import CapacityError

SMALL = WorldConfig(n_brands=4, corpus_size=600, min_mentions=5, brands_per_category=2)


def scan(doc, pattern):
    # independent overlapping-agnostic scan: positions where the pattern starts
    return [i for i in range(len(doc) - len(pattern) + 1) if tuple(doc[i:i + len(pattern)]) == tuple(pattern)]


def test_two_brand_world_is_deterministic():
    cfg = WorldConfig(n_brands=2, corpus_size=400, min_mentions=5)
    assert brandworld.world_to_dict(make_world(cfg)) == brandworld.world_to_dict(make_world(cfg))
    assert brandworld.world_to_dict(make_world(cfg)) != brandworld.world_to_dict(
        make_world(WorldConfig(n_brands=2, corpus_size=400, min_mentions=5, seed=1)))


def test_unpacks_like_a_triple():
    tok, brands, corpus = make_world(SMALL)
    assert len(brands) == 4 and len(corpus) == 600 and tok.vocab_size > 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_brand_mentions_reach_the_minimum(seed):
    world = make_world(WorldConfig(seed=seed))
    for b in world.brands:
        count = sum(len(scan(doc, b.token_seq)) for doc in world.corpus)
        assert count >= world.config.min_mentions


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_multi_token_pieces_are_exclusive(seed):
    world = make_world(WorldConfig(seed=seed))
    multi = [b for b in world.brands if b.T == 2]
    assert multi
    for b in multi:
        y1, y2 = b.token_seq
        assert y1 != y2
        for doc in world.corpus:
            for i, t in enumerate(doc):
                if t == y1:
                    assert i + 1 < len(doc) and doc[i + 1] == y2
                if t == y2:
                    assert i > 0 and doc[i - 1] == y1
        others = [o for o in world.brands if o.id != b.id]
        assert all(y1 not in o.token_seq and y2 not in o.token_seq for o in others)


def test_tokenizer_round_trip_on_corpus():
    world = make_world(SMALL)
    tok = world.tokenizer
    for doc in world.corpus:
        text = tok.detokenize(doc)
        assert tok.tokenize(text) == list(doc)
        assert tok.detokenize(tok.tokenize(text)) == text
    assert sorted(tok.ids.values()) == list(range(tok.vocab_size))


def test_completed_cloze_prompts_appear_in_corpus():
    world = make_world(WorldConfig())
    for b in world.brands:
        for p in b.cloze_prompts:
            completed = tuple(p) + b.token_seq
            assert any(scan(doc, completed) for doc in world.corpus)


def test_competitors_share_category_and_context():
    world = make_world(WorldConfig())
    for b in world.brands:
        assert b.id not in b.competitors
        assert len(b.competitors) == min(3, sum(o.category == b.category for o in world.brands) - 1)
        for c in b.competitors:
            assert world.brands[c].category == b.category
            pair = [d for d in world.corpus if scan(d, b.token_seq) and scan(d, world.brands[c].token_seq)]
            assert pair, (b.name, world.brands[c].name)


def test_shared_prompts():
    world = make_world(WorldConfig())
    a, b = world.brands[0], next(x for x in world.brands if x.category != world.brands[0].category)
    same = next(x for x in world.brands if x.category == a.category and x.id != a.id)
    assert world.shared_prompts([a.id, same.id]) == world.compatible_prompts[a.category]
    mixed = world.shared_prompts([a.id, b.id])
    assert mixed and mixed != world.shared_prompts([b.id, a.id])


def test_cloze_instances():
    world = make_world(WorldConfig())
    for b in world.brands:
        inst = cloze_instances(b)
        assert len(inst) == len(b.cloze_prompts) * b.T
        for prefix, target, t in inst:
            assert target == b.token_seq[t - 1]
            if t == 1:
                assert prefix in b.cloze_prompts
            else:
                assert prefix[-1] == b.token_seq[0]


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 8), m=st.integers(1, 4))
def test_instance_count_on_random_worlds(seed, n, m):
    world = make_world(WorldConfig(n_brands=n, prompts_per_brand=m, corpus_size=300, min_mentions=1,
                                   brands_per_category=2, seed=seed))
    for b in world.brands:
        assert len(cloze_instances(b)) == m * b.T


def test_capacity_errors():
    with pytest.raises(CapacityError):
        make_world(WorldConfig(n_brands=30))
    with pytest.raises(CapacityError):
        make_world(WorldConfig(max_vocab=50))
    with pytest.raises(CapacityError):
        make_world(WorldConfig(corpus_size=10))


def test_config_validation():
    with pytest.raises(ValueError):
        WorldConfig(n_brands=1)
    with pytest.raises(ValueError):
        WorldConfig(multi_token_fraction=1.5)


def test_json_round_trip(tmp_path):
    world = make_world(SMALL)
    brandworld.save_world(world, tmp_path / "w.json")
    back = brandworld.load_world(tmp_path / "w.json")
    assert brandworld.world_checksum(back) == brandworld.world_checksum(world)
    assert back.brands == world.brands and back.round_prompts == world.round_prompts


@pytest.mark.parametrize("seq,pattern,expected", [
    ([5, 6, 5, 6, 5, 6], [5, 6], 3),
    ([1, 2, 3], [5, 6], 0),
    ([1, 1, 2, 1, 2, 2], [1, 2], 2),
    ([7, 7, 7], [7, 7], 1),
])
def test_count_occurrences(seq, pattern, expected):
    assert count_occurrences(seq, pattern) == expected
