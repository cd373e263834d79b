import pandas as pd

from results_manager import COLUMNS, NA, ResultsManager, RunRecord


def _records():
    return [
        RunRecord(instance="ssp2", reform="plain", family="ssp", n=4, K=2, objective=1.5, nodes=3,
                  status="Optimal", time_bnb=0.25, time_total=0.25),
        RunRecord(instance="ssp1", reform="plain", family="ssp", n=4, K=2, objective=0.5, nodes=5,
                  status="Optimal", time_bnb=0.5, time_total=0.5),
        RunRecord(instance="ssp1", reform="lcr", family="ssp", n=4, K=2, objective=0.5, nodes=1,
                  status="Optimal", time_sdp_l=1.0, time_bnb=0.1, time_total=1.1),
    ]


def test_frame_is_sorted_with_fixed_columns():
    results = ResultsManager()
    for record in _records():
        results.add(record)
    df = results.to_frame()
    assert len(results) == 3
    assert list(df.columns) == COLUMNS
    assert list(zip(df["instance"], df["reform"])) == [("ssp1", "lcr"), ("ssp1", "plain"), ("ssp2", "plain")]
    assert (df["schema_version"] == 1).all()


def test_csv_masks_timings(tmp_path):
    results = ResultsManager()
    for record in _records():
        results.add(record)
    path = results.write_csv(tmp_path / "out.csv", include_timings=False)
    df = pd.read_csv(path, keep_default_na=False)
    assert set(df["time_total"]) == {NA}
    assert set(df["dominance"]) == {NA}
    assert list(df["nodes"]) == [1, 5, 3]


def test_floats_round_trip(tmp_path):
    results = ResultsManager()
    results.add(RunRecord(instance="a", reform="plain", objective=0.1 + 0.2))
    df = pd.read_csv(results.write_csv(tmp_path / "out.csv"), float_precision="round_trip")
    assert df.loc[0, "objective"] == 0.1 + 0.2


def test_averages_per_subset(tmp_path):
    results = ResultsManager()
    for record in _records():
        results.add(record)
    avg = results.averages()
    plain = avg[avg["reform"] == "plain"].iloc[0]
    assert plain["count"] == 2
    assert plain["objective"] == 1.0
    assert plain["nodes"] == 4.0
    results.write_averages(tmp_path / "avg.csv")
    assert (tmp_path / "avg.csv").exists()


def test_empty_averages():
    assert ResultsManager().averages().empty
