"""Synthetic planted-rule data and the flaw-detection benchmark."""
from .protocol import (
    LEDGER_COLUMNS, TYPES, BaseSelection, ChanceRates, DetectionTable, ModSample, ProtocolRun, build_mod_samples,
    chance_from_counts, chance_rates, evaluate_detection, make_mods, parse_types, select_base, write_detection_tables,
    write_ledger,
)
from .synth import SynthSpec, generate_synthetic, hue_rule, texture_rule
