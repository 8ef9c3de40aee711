from allsmiles import gradcheck


def test_every_op_matches_finite_differences() -> None:
    reports = gradcheck.check_ops(seeds=2)
    failed = [r.summary() for r in reports if not r.passed]
    assert not failed, failed
    assert all(r.probes > 0 for r in reports)


def test_blocks_match_finite_differences() -> None:
    reports = gradcheck.check_blocks(seeds=1)
    assert {r.name.split('[')[0] for r in reports} == {f'block.{name}' for name in gradcheck.BLOCKS}
    failed = [r.summary() for r in reports if not r.passed]
    assert not failed, failed


def test_micro_model_gradient() -> None:
    report = gradcheck.check_model(seed=0, probes=30)
    assert report.passed, report.summary()
    assert report.probes > 0


def test_suite_result_collects_failures() -> None:
    result = gradcheck.SuiteResult()
    assert result.passed
    result.reports += gradcheck.check_blocks(seeds=1)[:2]
    assert result.failures == [r for r in result.reports if not r.passed]
