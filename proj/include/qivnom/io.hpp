#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "qivnom/sim.hpp"

namespace qivnom {

// Key-value scenario files: one `key = value` per line, `#` starts a comment.
// An optional `scenario` / `scale` pair selects the preset the remaining keys
// override. Every problem is collected, then reported together as one
// ConfigError whose message has one "line N: key: reason" entry per line.
// With PresetKeys::Ignore the `scenario` / `scale` keys are accepted but have
// no effect (a preset chosen elsewhere takes precedence).
enum class PresetKeys { Apply, Ignore };

ScenarioConfig parse_config(std::string_view text);
ScenarioConfig parse_config(std::string_view text, const ScenarioConfig& base, PresetKeys presets = PresetKeys::Apply);
ScenarioConfig load_config(const std::filesystem::path& path);
ScenarioConfig load_config(const std::filesystem::path& path, const ScenarioConfig& base,
                           PresetKeys presets = PresetKeys::Apply);

// Emits every key; parse_config(emit_config(c), c) == c.
std::string emit_config(const ScenarioConfig& cfg);

std::string series_csv(const MetricsReport& r);
std::string report_json(const MetricsReport& r);
std::string summary_csv_header();
std::string summary_csv_row(const MetricsReport& r);

// Writes to a sibling temp file and renames it over the target.
void write_atomic(const std::filesystem::path& path, std::string_view content);

}  // namespace qivnom
