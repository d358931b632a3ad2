import numpy as np
import pytest

from src.core.basis import build_cyclic_basis
from src.core.errors import ConfigError
from src.core.models import FoSRFit
from src.core.surface import FitStage, MomentModel
from src.core.targets import TargetSpec, deepest_stage, format_vector, parse_vector


def test_parse_beta_and_noise_targets():
    beta = TargetSpec.parse("beta:2")
    assert beta.kind == "beta"
    assert beta.label == "beta:2"
    assert beta.parameter == "beta2"
    assert beta.probe == ""
    assert beta.required_stage is FitStage.FOSR

    noise = TargetSpec.parse(" sigma2_eps ")
    assert noise.label == "sigma2_eps"
    assert noise.required_stage is FitStage.SCORES


def test_parse_conditional_curve_targets():
    variance = TargetSpec.parse("variance:1,-10,0,0")
    assert variance.covariate == (1.0, -10.0, 0.0, 0.0)
    assert variance.label == "variance:1,-10,0,0"
    assert variance.parameter == "variance"
    assert variance.required_stage is FitStage.MOMENTS

    correlation = TargetSpec.parse("correlation:1,10,0,0@0.25")
    assert correlation.lag == 0.25
    assert correlation.probe == "1,10,0,0@0.25"

    ratio = TargetSpec.parse("variance_ratio:1,-10,0,0;1,10,0,0")
    assert ratio.covariate2 == (1.0, 10.0, 0.0, 0.0)
    assert ratio.probe == "1,-10,0,0;1,10,0,0"

    assert TargetSpec.parse("mean:1,0").required_stage is FitStage.FOSR


@pytest.mark.parametrize(
    "text",
    ["beta:", "gamma:1", "variance:", "correlation:1,0", "correlation:1,0@x",
     "variance_ratio:1,0", "skewness:1,a"],
)
def test_malformed_targets_are_rejected(text):
    with pytest.raises(ConfigError):
        TargetSpec.parse(text)


def test_vector_helpers():
    assert parse_vector("1, 2.5,-3") == (1.0, 2.5, -3.0)
    assert format_vector((1.0, -10.0, 0.25)) == "1,-10,0.25"
    with pytest.raises(ConfigError):
        parse_vector(" , ")


def test_coefficient_lookup_by_name_or_index():
    names = ["x1", "x2", "x3"]
    assert TargetSpec.parse("beta:x3").coefficient_index(names) == 2
    assert TargetSpec.parse("beta:1").coefficient_index(names) == 1
    with pytest.raises(ConfigError):
        TargetSpec.parse("beta:5").coefficient_index(names)
    with pytest.raises(ConfigError):
        TargetSpec.parse("beta:age").coefficient_index(names)


def test_evaluate_on_partial_model():
    grid = np.arange(1, 25) / 24
    beta = np.vstack([np.ones(24), np.arange(24.0)])
    model = MomentModel(
        basis=build_cyclic_basis(3, (0.0, 1.0), 5, grid),
        fosr=FoSRFit(
            beta_raw=beta,
            beta_smooth=beta,
            residuals=np.zeros((2, 24)),
            design_pinv=np.zeros((2, 2)),
        ),
        covariate_names=["x1", "x2"],
    )
    np.testing.assert_array_equal(TargetSpec.parse("beta:x2").evaluate(model), beta[1])
    np.testing.assert_array_equal(
        TargetSpec.parse("mean:1,2").evaluate(model), beta[0] + 2 * beta[1]
    )
    with pytest.raises(ConfigError):
        TargetSpec.parse("sigma2_eps").evaluate(model)


def test_deepest_stage():
    targets = [TargetSpec.parse("beta:0"), TargetSpec.parse("sigma2_eps")]
    assert deepest_stage(targets) is FitStage.SCORES
    targets.append(TargetSpec.parse("skewness:1,0"))
    assert deepest_stage(targets) is FitStage.MOMENTS
    assert deepest_stage([]) is FitStage.FOSR
