"""Synthetic-speaker experiments: data generation, the two training stages
and fusion."""

from .config import (ConfigError, IterationConfig, PipelineConfig, Stage1Config, default_config,
                     default_config_text, load_config, parse_config)
from .experiment import (Prepared, evaluate, evaluate_baseline, prepare, run_fusion, run_pipeline,
                         run_stage1, run_stage2)
from .report import ExperimentReport, ReportRow
from .synth import SynthConfig, SynthData, augment, synth_generate
