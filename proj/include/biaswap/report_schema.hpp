#pragma once

// Embedded copy of schemas/metrics_report.v1.json (kept identical by a unit test).

namespace biaswap {

inline constexpr const char* kMetricsReportSchemaV1 = R"SCHEMA({
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "biaswap metrics report",
  "type": "object",
  "required": ["schema_version", "config_hash", "config", "ablation_tag", "swap_mode", "seed", "dataset", "vanilla", "debiased",
               "delta_unbiased_accuracy", "partition", "loss_curves"],
  "additionalProperties": false,
  "properties": {
    "schema_version": {"type": "integer", "enum": [1]},
    "config_hash": {"type": "string"},
    "config": {"type": "object", "additionalProperties": {"type": "string"}},
    "ablation_tag": {"type": "string", "enum": ["full", "w/o c1", "w/o c2", "w/o c1+c2"]},
    "swap_mode": {"type": "string", "enum": ["gan", "oracle"]},
    "seed": {"type": "integer", "minimum": 0},
    "dataset": {
      "type": "object",
      "required": ["kind", "bias_ratio", "num_train", "num_augmented"],
      "additionalProperties": false,
      "properties": {
        "kind": {"type": "string", "enum": ["colored_mnist", "corrupted_cifar10"]},
        "bias_ratio": {"type": "number", "minimum": 0, "maximum": 1},
        "num_train": {"type": "integer", "minimum": 1},
        "num_augmented": {"type": "integer", "minimum": 0}
      }
    },
    "vanilla": {"$ref": "#/$defs/accuracies"},
    "debiased": {"$ref": "#/$defs/accuracies"},
    "delta_unbiased_accuracy": {"type": "number", "minimum": -1, "maximum": 1},
    "partition": {
      "type": "object",
      "required": ["precision", "recall", "f1", "threshold", "num_contrary"],
      "additionalProperties": false,
      "properties": {
        "precision": {"type": "number", "minimum": 0, "maximum": 1},
        "recall": {"type": "number", "minimum": 0, "maximum": 1},
        "f1": {"type": "number", "minimum": 0, "maximum": 1},
        "threshold": {"type": "number", "minimum": 0, "maximum": 1},
        "num_contrary": {"type": "integer", "minimum": 0}
      }
    },
    "swap_probe": {
      "type": "object",
      "required": ["pairs", "hue_transfer"],
      "additionalProperties": false,
      "properties": {
        "pairs": {"type": "integer", "minimum": 0},
        "hue_transfer": {"type": "number", "minimum": 0, "maximum": 1}
      }
    },
    "loss_curves": {"type": "object", "additionalProperties": {"type": "string"}}
  },
  "$defs": {
    "accuracies": {
      "type": "object",
      "required": ["unbiased_accuracy", "bias_guiding_accuracy", "bias_contrary_accuracy"],
      "additionalProperties": false,
      "properties": {
        "unbiased_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "bias_guiding_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "bias_contrary_accuracy": {"type": "number", "minimum": 0, "maximum": 1}
      }
    }
  }
}
)SCHEMA";

}  // namespace biaswap
