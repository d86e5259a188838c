import dataclasses

import pytest

from scl_lle.ablation import ABLATION_SWITCHES, UnknownSwitchError, derive_config
from scl_lle.trainer import TrainConfig


def _diff(a, b):
    return {f.name for f in dataclasses.fields(a) if getattr(a, f.name) != getattr(b, f.name)}


def test_no_lc_is_single_field_delta():
    base = TrainConfig(seed=3)
    derived = derive_config(base, "no-lc")
    assert derived.w_c == 0.0
    assert _diff(base, derived) == {"w_c", "tag"}


def test_no_neg_disables_both_pools():
    derived = derive_config(TrainConfig(), "no-neg")
    assert not derived.use_neg_over and not derived.use_neg_under


@pytest.mark.parametrize("switch", sorted(ABLATION_SWITCHES))
def test_every_switch_tags_config(switch):
    assert derive_config(TrainConfig(tag="base"), switch).tag == f"base+{switch}"


def test_unknown_switch():
    with pytest.raises(UnknownSwitchError):
        derive_config(TrainConfig(), "no-foo")
