#include "emphseg/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "emphseg/binary_io.hpp"
#include "emphseg/errors.hpp"

namespace emphseg::eval {

namespace {

constexpr const char* kReportHeader = "# emphseg report v1";

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

std::string join_row(std::initializer_list<std::string> cells) {
  std::string out;
  for (const auto& c : cells) {
    if (!out.empty()) out += '\t';
    out += c;
  }
  return out + '\n';
}

void write_aggregate_row(std::ostringstream& os, const std::string& label, const Aggregate& a) {
  using io::format_double;
  os << join_row({label, std::to_string(a.count), format_double(a.ref.mean), format_double(a.ref.std),
                  format_double(a.pred.mean), format_double(a.pred.std), format_double(a.error.mean),
                  format_double(a.error.std), format_double(a.dsc.mean), format_double(a.dsc.std)});
}

void write_box_rows(std::ostringstream& os, const std::string& label, const Aggregate& a) {
  using io::format_double;
  for (const auto& [metric, b] : {std::pair{"signed_error", a.error_box}, std::pair{"dsc", a.dsc_box}}) {
    os << join_row({label, metric, format_double(b.min), format_double(b.q1), format_double(b.median),
                    format_double(b.q3), format_double(b.max)});
  }
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  if (values.empty()) return out;
  double sum = 0.0;
  for (double v : values) sum += v;
  out.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

FiveNumber five_number(std::vector<double> values) {
  if (values.empty()) return {};
  std::sort(values.begin(), values.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  return {values.front(), quantile(0.25), quantile(0.5), quantile(0.75), values.back()};
}

Aggregate aggregate(std::span<const ScanEval> scans) {
  Aggregate a;
  a.count = scans.size();
  std::vector<double> ref, pred, err, dsc;
  for (const auto& s : scans) {
    ref.push_back(s.pct_emph_ref);
    pred.push_back(s.pct_emph_pred);
    err.push_back(s.signed_error);
    dsc.push_back(s.dsc);
  }
  a.ref = mean_std(ref);
  a.pred = mean_std(pred);
  a.error = mean_std(err);
  a.dsc = mean_std(dsc);
  a.error_box = five_number(err);
  a.dsc_box = five_number(dsc);
  return a;
}

EvalReport EvalReport::build(net::Variant variant, Split split, std::vector<ScanEval> scans) {
  EvalReport r;
  r.variant = variant;
  r.split = split;
  std::sort(scans.begin(), scans.end(), [](const ScanEval& a, const ScanEval& b) { return a.scan_id < b.scan_id; });
  for (std::size_t i = 1; i < scans.size(); ++i) {
    if (scans[i].scan_id == scans[i - 1].scan_id) throw ContractError("duplicate scan " + scans[i].scan_id);
  }
  r.scans = std::move(scans);
  std::map<ScannerTag, std::vector<ScanEval>> groups;
  for (const auto& s : r.scans) groups[s.scanner].push_back(s);
  for (const auto& [tag, group] : groups) r.per_scanner[tag] = aggregate(group);
  r.global = aggregate(r.scans);
  return r;
}

std::string report_to_text(const EvalReport& r) {
  using io::format_double;
  std::ostringstream os;
  os << kReportHeader << '\n';
  os << "variant\t" << net::to_string(r.variant) << '\n';
  os << "split\t" << to_string(r.split) << '\n';
  os << "[scans]\n";
  os << join_row({"scan_id", "scanner", "pct_emph_ref", "pct_emph_pred", "signed_error", "dsc"});
  for (const auto& s : r.scans) {
    os << join_row({s.scan_id, s.scanner.id, format_double(s.pct_emph_ref), format_double(s.pct_emph_pred),
                    format_double(s.signed_error), format_double(s.dsc)});
  }
  os << "[aggregates]\n";
  os << join_row({"scanner", "n", "ref_mean", "ref_std", "pred_mean", "pred_std", "error_mean", "error_std",
                  "dsc_mean", "dsc_std"});
  for (const auto& [tag, a] : r.per_scanner) write_aggregate_row(os, tag.id, a);
  write_aggregate_row(os, "all", r.global);
  os << "[boxplots]\n";
  os << join_row({"scanner", "metric", "min", "q1", "median", "q3", "max"});
  for (const auto& [tag, a] : r.per_scanner) write_box_rows(os, tag.id, a);
  write_box_rows(os, "all", r.global);
  return os.str();
}

EvalReport report_from_text(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kReportHeader) throw FormatError("not an evaluation report");
  auto field = [&](const char* key) {
    if (!std::getline(is, line)) throw TruncatedError("report ends before '" + std::string(key) + "'");
    const auto cells = split_tabs(line);
    if (cells.size() != 2 || cells[0] != key) throw FormatError("report: expected '" + std::string(key) + "' line");
    return cells[1];
  };
  net::Variant variant;
  Split split;
  try {
    variant = net::parse_variant(field("variant"));
    split = parse_split(field("split"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  if (!std::getline(is, line) || line != "[scans]") throw FormatError("report: missing [scans] section");
  if (!std::getline(is, line)) throw TruncatedError("report: missing scan header");
  std::vector<ScanEval> scans;
  bool closed = false;
  while (std::getline(is, line)) {
    if (line == "[aggregates]") {
      closed = true;
      break;
    }
    const auto c = split_tabs(line);
    if (c.size() != 6) throw FormatError("report: scan row needs 6 columns");
    ScanEval s;
    s.scan_id = c[0];
    s.scanner = ScannerTag(c[1]);
    try {
      s.pct_emph_ref = io::parse_double(c[2]);
      s.pct_emph_pred = io::parse_double(c[3]);
      s.signed_error = io::parse_double(c[4]);
      s.dsc = io::parse_double(c[5]);
    } catch (const Error&) {
      throw FormatError("report: bad number in row for " + s.scan_id);
    }
    scans.push_back(std::move(s));
  }
  if (!closed) throw TruncatedError("report: missing [aggregates] section");
  return EvalReport::build(variant, split, std::move(scans));
}

void write_report(const EvalReport& r, const std::filesystem::path& path) {
  io::write_text_file(path, report_to_text(r));
}

EvalReport read_report(const std::filesystem::path& path) { return report_from_text(io::read_text_file(path)); }

Model model_from_checkpoint(const Checkpoint& c) {
  c.config.validate();
  const auto like = net::init_params<float>(c.config);
  return Model{c.config, load_params(c.arrays, like)};
}

EvalReport evaluate_split(const Predictor& predict, const DatasetManifest& manifest, Split split,
                          net::Variant variant) {
  auto records = manifest.with_split(split);
  std::sort(records.begin(), records.end(),
            [](const ManifestRecord& a, const ManifestRecord& b) { return a.scan_id < b.scan_id; });
  std::vector<ScanEval> scans;
  for (const auto& r : records) {
    const auto volume = read_volume(manifest.resolve(r));
    scans.push_back(eval_scan(predict(volume), volume));
  }
  return EvalReport::build(variant, split, std::move(scans));
}

EvalReport run_eval(const Checkpoint& checkpoint, const DatasetManifest& manifest, Split split,
                    const std::map<ScannerTag, cdf::CdfFeature>& priors) {
  const auto model = model_from_checkpoint(checkpoint);
  const DomainContext ctx{model.config.variant, priors};
  if (net::uses_domain(model.config.variant)) {
    for (const auto& r : manifest.with_split(split)) ctx.prior_for(r.scanner);
  }
  return evaluate_split([&](const CtVolume& v) { return predict_scan(model, v, ctx); }, manifest, split,
                        model.config.variant);
}

Comparison compare_variants(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ContractError("compare_variants: no reports");
  auto ids = [](const EvalReport& r) {
    std::vector<std::string> out;
    for (const auto& s : r.scans) out.push_back(s.scan_id);
    std::sort(out.begin(), out.end());
    return out;
  };
  const auto ref_ids = ids(reports.front());
  std::set<net::Variant> seen;
  for (const auto& r : reports) {
    if (r.split != reports.front().split) throw ContractError("compare_variants: reports cover different splits");
    if (ids(r) != ref_ids) throw ContractError("compare_variants: reports cover different scan sets");
    if (!seen.insert(r.variant).second) {
      throw ContractError("compare_variants: variant " + net::to_string(r.variant) + " appears twice");
    }
  }
  Comparison c;
  c.split = reports.front().split;
  for (const auto& r : reports) c.rows.push_back({r.variant, r.global, 0.0, 0.0});
  std::sort(c.rows.begin(), c.rows.end(), [](const auto& a, const auto& b) { return a.variant < b.variant; });
  const auto& base = c.rows.front().global;  // plain_unet sorts first when present
  for (auto& row : c.rows) {
    row.delta_error = std::abs(row.global.error.mean) - std::abs(base.error.mean);
    row.delta_dsc = row.global.dsc.mean - base.dsc.mean;
  }
  const auto best_err = std::min_element(c.rows.begin(), c.rows.end(), [](const auto& a, const auto& b) {
    return std::abs(a.global.error.mean) < std::abs(b.global.error.mean);
  });
  const auto best_dsc = std::max_element(c.rows.begin(), c.rows.end(), [](const auto& a, const auto& b) {
    return a.global.dsc.mean < b.global.dsc.mean;
  });
  c.best_error = best_err->variant;
  c.best_dsc = best_dsc->variant;
  return c;
}

std::string comparison_to_text(const Comparison& c) {
  std::ostringstream os;
  os << "# split\t" << to_string(c.split) << '\n';
  os << join_row({"variant", "n", "mean_error_pct", "error_std_pct", "dsc_pct", "dsc_std_pct", "delta_abs_error_pct",
                  "delta_dsc_pct", "best_error", "best_dsc"});
  for (const auto& r : c.rows) {
    os << join_row({net::to_string(r.variant), std::to_string(r.global.count), percent(r.global.error.mean),
                    percent(r.global.error.std), percent(100.0 * r.global.dsc.mean),
                    percent(100.0 * r.global.dsc.std), percent(r.delta_error), percent(100.0 * r.delta_dsc),
                    r.variant == c.best_error ? "*" : "", r.variant == c.best_dsc ? "*" : ""});
  }
  return os.str();
}

RgbImage render_overlay(const CtSlice& slice, std::span<const std::uint8_t> pred, std::span<const std::uint8_t> ref) {
  const std::size_t n = slice.height * slice.width;
  if (pred.size() != n || ref.size() != n || slice.hu.size() != n) {
    throw ContractError("render_overlay: mask shape differs from the slice");
  }
  constexpr double lo = -1024.0, hi = -300.0;
  RgbImage img{slice.width, slice.height, std::vector<std::uint8_t>(3 * n)};
  for (std::size_t i = 0; i < n; ++i) {
    const bool p = pred[i] != 0, r = ref[i] != 0;
    std::array<std::uint8_t, 3> color;
    if (p && r) {
      color = kTruePositive;
    } else if (r) {
      color = kFalseNegative;
    } else if (p) {
      color = kFalsePositive;
    } else {
      const double t = std::clamp((static_cast<double>(slice.hu[i]) - lo) / (hi - lo), 0.0, 1.0);
      const auto g = static_cast<std::uint8_t>(std::lround(255.0 * t));
      color = {g, g, g};
    }
    std::copy(color.begin(), color.end(), img.rgb.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }
  return img;
}

std::vector<std::uint8_t> encode_ppm(const RgbImage& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.rgb.begin(), img.rgb.end());
  return out;
}

void write_ppm(const RgbImage& img, const std::filesystem::path& path) { io::write_file(path, encode_ppm(img)); }

}  // namespace emphseg::eval
