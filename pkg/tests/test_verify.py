from mnnca import verify


def test_fresh_build_passes_all_checks():
    results = verify.run_all(trials=1)
    failed = [r.line() for r in results if not r.passed]
    assert not failed, failed
    names = {r.name for r in results}
    assert {f"grad {n}" for n in verify.GRAD_CASES} <= names
    assert all("max rel err" in r.detail for r in results if r.name.startswith("grad "))


def test_perturbed_conv_backward_is_caught():
    with verify.perturbed_conv_backward():
        results = verify.gradient_suite(trials=1)
    failed = {r.name for r in results if not r.passed}
    assert {"grad conv2d_circular[depthwise]", "grad conv2d_circular[grouped]",
            "grad conv2d_circular[dense 5x5]"} <= failed
