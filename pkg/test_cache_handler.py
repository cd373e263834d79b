from cache_handler import ParameterCache


def test_hit_and_miss(small_mv, small_ssp):
    cache = ParameterCache()
    calls = []

    def compute():
        calls.append(1)
        return {"rho": [1.0]}

    first = cache.get_or_compute(small_mv, "rho:sdp_l", compute)
    second = cache.get_or_compute(small_mv, "rho:sdp_l", compute)
    assert first is second
    assert len(calls) == 1
    assert cache.hits == 1 and cache.misses == 1

    cache.get_or_compute(small_ssp, "rho:sdp_l", compute)
    cache.get_or_compute(small_mv, "rho:zero", compute)
    assert len(calls) == 3
    assert len(cache) == 3


def test_key_follows_content(small_mv):
    cache = ParameterCache()
    cache.set(small_mv, "lift", 1)
    assert cache.get(small_mv.replace(), "lift") == 1
    changed = small_mv.replace(c=small_mv.c + 1.0)
    assert cache.get(changed, "lift") is None
    cache.clear()
    assert cache.get(small_mv, "lift") is None
