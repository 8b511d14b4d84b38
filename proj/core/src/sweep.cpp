#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mrcl/errors.hpp"
#include "mrcl/evaluation.hpp"

namespace mrcl::eval {

namespace fs = std::filesystem;
using nlohmann::json;

SweepAxis parse_sweep_axis(std::string_view name) {
  if (name == "mask_ratio") return SweepAxis::kMaskRatio;
  if (name == "rec_weight") return SweepAxis::kRecWeight;
  if (name == "mask_unmask_ratio") return SweepAxis::kMaskUnmaskRatio;
  throw ConfigError("unknown sweep axis '" + std::string(name) +
                    "' (expected mask_ratio, rec_weight or mask_unmask_ratio)");
}

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kMaskRatio: return "mask_ratio";
    case SweepAxis::kRecWeight: return "rec_weight";
    case SweepAxis::kMaskUnmaskRatio: return "mask_unmask_ratio";
  }
  return "?";
}

namespace {

std::string format_value(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

bool same(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(b)); }

}  // namespace

void SweepSpec::validate() const {
  if (values.size() < 2) throw ConfigError("sweep.values needs at least 2 entries");
  if (seeds.empty()) throw ConfigError("sweep.seeds must not be empty");
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (same(values[i], values[j])) throw ConfigError("sweep.values contains a duplicate: " + format_value(values[i]));
    }
  }
  for (double v : values) {
    const bool ok = axis == SweepAxis::kMaskRatio   ? (v >= 0.0 && v < 1.0)
                    : axis == SweepAxis::kRecWeight ? v >= 0.0
                                                    : (v > 0.0 && std::isfinite(v));
    if (!ok) throw ConfigError("sweep value " + format_value(v) + " is outside the " + to_string(axis) + " domain");
  }
  for (const auto& c : comparisons) {
    const auto has = [&](double x) {
      return std::any_of(values.begin(), values.end(), [&](double v) { return same(v, x); });
    };
    if (!has(c.better) || !has(c.worse)) throw ConfigError("sweep comparison refers to a value not in sweep.values");
  }
  probe.validate();
  for (double v : values) cell_config(*this, v, seeds.front()).validate();
  if (out_dir.empty()) throw ConfigError("sweep out_dir must be set");
}

train::PretrainConfig cell_config(const SweepSpec& spec, double value, std::uint64_t seed) {
  train::PretrainConfig cfg = spec.base;
  cfg.train.seed = seed;
  switch (spec.axis) {
    case SweepAxis::kMaskRatio: cfg.train.mask_ratio = value; break;
    case SweepAxis::kRecWeight:
      cfg.train.loss.alpha = value;
      cfg.train.loss.lam = value;
      break;
    case SweepAxis::kMaskUnmaskRatio: cfg.train.loss.lam = cfg.train.loss.alpha / value; break;
  }
  cfg.run_dir = spec.out_dir / "cells" / cell_name(spec, value, seed);
  return cfg;
}

std::string cell_name(const SweepSpec& spec, double value, std::uint64_t seed) {
  return to_string(spec.axis) + "_" + format_value(value) + "_seed" + std::to_string(seed);
}

std::string SweepCell::to_json() const {
  json j = {{"value", value}, {"seed", seed},           {"ok", ok},
            {"error", error}, {"top1", top1},           {"train_top1", train_top1},
            {"final_loss", final_loss},                 {"run_dir", run_dir}};
  return j.dump();
}

SweepCell SweepCell::from_json(const std::string& line) {
  const auto j = json::parse(line);
  SweepCell c;
  j.at("value").get_to(c.value);
  j.at("seed").get_to(c.seed);
  j.at("ok").get_to(c.ok);
  j.at("error").get_to(c.error);
  j.at("top1").get_to(c.top1);
  j.at("train_top1").get_to(c.train_top1);
  j.at("final_loss").get_to(c.final_loss);
  j.at("run_dir").get_to(c.run_dir);
  return c;
}

std::string Verdict::describe() const {
  std::ostringstream s;
  s << "acc(" << format_value(comparison.better) << ") " << (comparison.strict ? ">" : ">=") << " acc("
    << format_value(comparison.worse) << "): " << wins << "/" << seeds << " seeds -> "
    << (holds ? "holds" : "does not hold");
  return s.str();
}

const SweepCell* SweepReport::find(double value, std::uint64_t seed) const {
  for (const auto& c : cells) {
    if (same(c.value, value) && c.seed == seed) return &c;
  }
  return nullptr;
}

double SweepReport::mean(double value) const {
  double sum = 0.0;
  int count = 0;
  for (const auto& c : cells) {
    if (c.ok && same(c.value, value)) {
      sum += c.top1;
      ++count;
    }
  }
  return count ? sum / count : std::numeric_limits<double>::quiet_NaN();
}

std::string SweepReport::summary() const {
  std::ostringstream s;
  s << "sweep over " << to_string(axis) << " (" << values.size() << " values x " << seeds.size() << " seeds)\n";
  s << std::fixed << std::setprecision(4);
  for (double v : values) {
    s << "  " << to_string(axis) << "=" << format_value(v) << "  mean top-1 " << mean(v) << "  [";
    for (std::size_t k = 0; k < seeds.size(); ++k) {
      const SweepCell* c = find(v, seeds[k]);
      if (k) s << ", ";
      if (!c) {
        s << "missing";
      } else if (!c->ok) {
        s << "FAILED";
      } else {
        s << c->top1;
      }
    }
    s << "]\n";
  }
  for (const auto& c : cells) {
    if (!c.ok) s << "  failed cell " << format_value(c.value) << "/seed" << c.seed << ": " << c.error << "\n";
  }
  for (const auto& v : verdicts) s << "  " << v.describe() << "\n";
  return s.str();
}

std::string SweepReport::plot_table() const {
  std::ostringstream s;
  s << to_string(axis) << "\tmean";
  for (auto seed : seeds) s << "\tseed" << seed;
  s << "\n" << std::setprecision(6);
  for (double v : values) {
    s << format_value(v) << "\t" << mean(v);
    for (auto seed : seeds) {
      const SweepCell* c = find(v, seed);
      s << "\t";
      if (c && c->ok) {
        s << c->top1;
      } else {
        s << "nan";
      }
    }
    s << "\n";
  }
  return s.str();
}

void SweepReport::write(const fs::path& dir) const {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create sweep directory " + dir.string() + ": " + ec.message());
  const auto put = [&](const std::string& name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    out << text;
  };
  std::string lines;
  for (const auto& c : cells) lines += c.to_json() + "\n";
  put("report.jsonl", lines);
  put("summary.txt", summary());
  put("plot.tsv", plot_table());
}

std::vector<Verdict> compute_verdicts(const SweepReport& report, const std::vector<Comparison>& comparisons) {
  std::vector<Comparison> wanted = comparisons;
  if (wanted.empty() && report.values.size() >= 3) {
    std::vector<double> sorted = report.values;
    std::sort(sorted.begin(), sorted.end());
    double best = sorted[1];
    for (std::size_t i = 1; i + 1 < sorted.size(); ++i) {
      const double m = report.mean(sorted[i]);
      if (!std::isnan(m) && (std::isnan(report.mean(best)) || m > report.mean(best))) best = sorted[i];
    }
    wanted.push_back({best, sorted.front(), true});
    wanted.push_back({best, sorted.back(), true});
  }
  std::vector<Verdict> out;
  for (const auto& c : wanted) {
    Verdict v;
    v.comparison = c;
    v.seeds = static_cast<int>(report.seeds.size());
    for (auto seed : report.seeds) {
      const SweepCell* a = report.find(c.better, seed);
      const SweepCell* b = report.find(c.worse, seed);
      if (!a || !b || !a->ok || !b->ok) continue;
      if (c.strict ? a->top1 > b->top1 : a->top1 >= b->top1) ++v.wins;
    }
    v.holds = 2 * v.wins > v.seeds;
    out.push_back(v);
  }
  return out;
}

SweepReport run_sweep(const SweepSpec& spec, std::ostream* log) {
  spec.validate();
  return run_sweep(spec, spec.base.dataset.load(), spec.probe_train.load(), spec.probe_test.load(), log);
}

SweepReport run_sweep(const SweepSpec& spec, const data::Dataset& pretrain_set, const data::Dataset& probe_train,
                      const data::Dataset& probe_test, std::ostream* log) {
  spec.validate();
  SweepReport report;
  report.axis = spec.axis;
  report.values = spec.values;
  report.seeds = spec.seeds;
  for (double value : spec.values) {
    for (auto seed : spec.seeds) {
      const train::PretrainConfig cfg = cell_config(spec, value, seed);
      const fs::path cell_file = cfg.run_dir / "cell.json";
      if (fs::exists(cell_file)) {
        std::ifstream in(cell_file);
        std::string line;
        std::getline(in, line);
        try {
          SweepCell done = SweepCell::from_json(line);
          if (done.ok) {
            if (log) *log << "skip completed cell " << cell_name(spec, value, seed) << "\n";
            report.cells.push_back(done);
            continue;
          }
        } catch (const std::exception&) {
        }
      }
      SweepCell cell;
      cell.value = value;
      cell.seed = seed;
      cell.run_dir = cfg.run_dir.string();
      if (log) *log << "cell " << cell_name(spec, value, seed) << "\n";
      try {
        train::PretrainOptions opts;
        opts.log = log;
        const fs::path ckpt = train::pretrain(cfg, pretrain_set, opts);
        const auto metrics = train::read_metrics(cfg.run_dir / "metrics.jsonl");
        if (!metrics.empty()) cell.final_loss = metrics.back().loss.total;
        ProbeConfig probe = spec.probe;
        probe.seed = seed;
        const ProbeResult r = linear_probe(ckpt, probe_train, probe_test, probe);
        cell.top1 = r.top1;
        cell.train_top1 = r.train_top1;
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
        if (log) *log << "cell failed: " << e.what() << "\n";
      }
      std::error_code ec;
      fs::create_directories(cfg.run_dir, ec);
      std::ofstream(cell_file, std::ios::trunc) << cell.to_json() << "\n";
      report.cells.push_back(cell);
    }
  }
  report.verdicts = compute_verdicts(report, spec.comparisons);
  report.write(spec.out_dir);
  return report;
}

}  // namespace mrcl::eval
