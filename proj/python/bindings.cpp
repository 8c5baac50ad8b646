#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "emphseg/binary_io.hpp"
#include "emphseg/cdf_features.hpp"
#include "emphseg/checkpoint.hpp"
#include "emphseg/core_data.hpp"
#include "emphseg/errors.hpp"
#include "emphseg/evaluator.hpp"
#include "emphseg/objective.hpp"
#include "emphseg/phantom.hpp"
#include "emphseg/trainer.hpp"

namespace py = pybind11;
using namespace emphseg;

namespace {

template <class T>
py::array_t<T> to_array(const std::vector<T>& values, std::vector<py::ssize_t> shape) {
  py::array_t<T> out(shape);
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

template <class T>
std::vector<T> flat(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
  return std::vector<T>(a.data(), a.data() + a.size());
}

Dims3 dims_of(const py::array& a) {
  if (a.ndim() != 3) throw ContractError("expected a (slices, height, width) array");
  return {static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
          static_cast<std::size_t>(a.shape(2))};
}

CtVolume volume_from_arrays(py::array_t<std::int16_t, py::array::c_style | py::array::forcecast> hu,
                            py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> lung,
                            py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> emph,
                            const std::string& scan_id, const std::string& scanner) {
  const auto d = dims_of(hu);
  return CtVolume(scan_id, ScannerTag(scanner), d, flat(hu), flat(lung), flat(emph));
}

// emphysema mask left empty; used where only HU and lung matter
CtVolume lung_only(py::array_t<std::int16_t, py::array::c_style | py::array::forcecast> hu,
                   py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> lung) {
  const auto d = dims_of(hu);
  return CtVolume("scan", ScannerTag("any"), d, flat(hu), flat(lung), std::vector<std::uint8_t>(d.voxels(), 0));
}

py::dict volume_to_dict(const CtVolume& v) {
  const auto& d = v.dims();
  const std::vector<py::ssize_t> shape{static_cast<py::ssize_t>(d.slices), static_cast<py::ssize_t>(d.height),
                                       static_cast<py::ssize_t>(d.width)};
  py::dict out;
  out["scan_id"] = v.scan_id();
  out["scanner"] = v.scanner().id;
  out["hu"] = to_array(std::vector<std::int16_t>(v.hu().begin(), v.hu().end()), shape);
  out["lung"] = to_array(std::vector<std::uint8_t>(v.lung_mask().begin(), v.lung_mask().end()), shape);
  out["emph"] = to_array(std::vector<std::uint8_t>(v.emph_mask().begin(), v.emph_mask().end()), shape);
  out["metadata"] = v.metadata();
  return out;
}

Tensor<double> tensor_from(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 4) throw ContractError("expected an (N, C, H, W) array");
  Tensor<double> t(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                   static_cast<std::size_t>(a.shape(2)), static_cast<std::size_t>(a.shape(3)));
  std::copy(a.data(), a.data() + a.size(), t.data());
  return t;
}

py::dict summary(const eval::Aggregate& a) {
  py::dict d;
  d["count"] = a.count;
  d["ref_mean"] = a.ref.mean;
  d["pred_mean"] = a.pred.mean;
  d["error_mean"] = a.error.mean;
  d["error_std"] = a.error.std;
  d["dsc_mean"] = a.dsc.mean;
  d["dsc_std"] = a.dsc.std;
  return d;
}

std::map<ScannerTag, cdf::CdfFeature> priors_from(const std::map<std::string, std::filesystem::path>& files) {
  std::map<ScannerTag, cdf::CdfFeature> out;
  for (const auto& [tag, path] : files) out.emplace(ScannerTag(tag), cdf::read_cdf(path));
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Scanner-robust emphysema segmentation toolkit (C++ core)";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<DegenerateInputError>(m, "DegenerateInputError", base.ptr());
  py::register_exception<DivergenceError>(m, "DivergenceError", base.ptr());
  py::register_exception<GenerationError>(m, "GenerationError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());

  m.def(
      "build_dataset",
      [](const std::filesystem::path& out, std::uint64_t seed, std::optional<std::filesystem::path> config) {
        auto cfg = config ? phantom::dataset_config_from(KeyValueConfig::load(*config))
                          : phantom::default_dataset_config();
        return phantom::build_dataset(cfg, seed, out).records().size();
      },
      py::arg("out"), py::arg("seed") = 0, py::arg("config") = py::none(),
      "Generate the multi-scanner phantom dataset under `out`; returns the scan count.");

  m.def(
      "read_manifest",
      [](const std::filesystem::path& path) {
        py::list rows;
        const auto manifest = read_manifest(path);
        for (const auto& r : manifest.records()) {
          py::dict d;
          d["scan_id"] = r.scan_id;
          d["scanner"] = r.scanner.id;
          d["split"] = to_string(r.split);
          d["path"] = r.path;
          d["never_smoker"] = r.never_smoker;
          d["pct950"] = r.pct950 ? py::cast(*r.pct950) : py::none();
          rows.append(d);
        }
        return rows;
      },
      py::arg("path"));

  m.def("read_volume", [](const std::filesystem::path& p) { return volume_to_dict(read_volume(p)); }, py::arg("path"));
  m.def(
      "write_volume",
      [](const std::filesystem::path& p, py::array_t<std::int16_t, py::array::c_style | py::array::forcecast> hu,
         py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> lung,
         py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> emph, const std::string& scan_id,
         const std::string& scanner) { write_volume(volume_from_arrays(hu, lung, emph, scan_id, scanner), p); },
      py::arg("path"), py::arg("hu"), py::arg("lung"), py::arg("emph"), py::arg("scan_id"), py::arg("scanner"));

  m.def(
      "percent_emphysema",
      [](py::array_t<std::int16_t, py::array::c_style | py::array::forcecast> hu,
         py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> lung,
         py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> mask) {
        const auto v = lung_only(hu, lung);
        return percent_emphysema(v, Mask3(v.dims(), flat(mask)));
      },
      py::arg("hu"), py::arg("lung"), py::arg("mask"));

  m.def(
      "cdf_of_scan",
      [](py::array_t<std::int16_t, py::array::c_style | py::array::forcecast> hu,
         py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> lung, std::size_t bins) {
        const auto v = lung_only(hu, lung);
        cdf::BinEdges edges;
        edges.bins = bins;
        const auto f = cdf::cdf_of_scan(v, edges);
        return to_array(f.values, {static_cast<py::ssize_t>(f.values.size())});
      },
      py::arg("hu"), py::arg("lung"), py::arg("bins") = 512, "Lung-HU CDF over [-1024, -700] HU.");

  m.def(
      "scanner_prior",
      [](const std::filesystem::path& manifest, const std::string& scanner, std::size_t bins) {
        cdf::BinEdges edges;
        edges.bins = bins;
        const auto f = cdf::scanner_prior(read_manifest(manifest), ScannerTag(scanner), edges);
        return py::make_tuple(to_array(f.values, {static_cast<py::ssize_t>(f.values.size())}), f.sources);
      },
      py::arg("manifest"), py::arg("scanner"), py::arg("bins") = 512,
      "Pooled CDF of the scanner's reference scans; returns (values, reference scan ids).");

  m.def(
      "write_prior",
      [](const std::filesystem::path& manifest, const std::string& scanner, const std::filesystem::path& out) {
        cdf::write_cdf(cdf::scanner_prior(read_manifest(manifest), ScannerTag(scanner)), out);
      },
      py::arg("manifest"), py::arg("scanner"), py::arg("out"));

  m.def(
      "lr_at",
      [](std::size_t epoch, std::optional<std::filesystem::path> config) {
        train::TrainConfig cfg;
        if (config) cfg = train::TrainConfig::from_config(KeyValueConfig::load(*config).global());
        return train::lr_at(epoch, cfg);
      },
      py::arg("epoch"), py::arg("config") = py::none());

  m.def(
      "segmentation_loss",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> y,
         py::array_t<double, py::array::c_style | py::array::forcecast> yhat) {
        const auto l = segmentation_loss(tensor_from(y), tensor_from(yhat));
        return py::make_tuple(l.total, l.ce_term, l.dice_term);
      },
      py::arg("y"), py::arg("yhat"), "Joint CE + soft Dice on (N, 2, H, W) probabilities; returns (total, ce, dice).");

  m.def(
      "dsc",
      [](py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> pred,
         py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> ref) {
        if (pred.size() != ref.size()) throw ContractError("dsc: shape mismatch");
        return dsc(flat(pred), flat(ref));
      },
      py::arg("pred"), py::arg("ref"));

  m.def(
      "train",
      [](const std::filesystem::path& manifest, const std::string& variant, const std::filesystem::path& out,
         std::map<std::string, std::filesystem::path> priors, std::optional<std::filesystem::path> net_config,
         std::optional<std::filesystem::path> train_config) {
        net::NetworkConfig nc;
        if (net_config) nc = net::NetworkConfig::from_config(KeyValueConfig::load(*net_config).global());
        nc.variant = net::parse_variant(variant);
        train::TrainConfig tc;
        if (train_config) tc = train::TrainConfig::from_config(KeyValueConfig::load(*train_config).global());
        train::TrainResult result;
        {
          py::gil_scoped_release release;
          result = train::train(read_manifest(manifest), nc, tc, priors_from(priors));
        }
        write_checkpoint(result.best, out / "best.ckpt");
        io::write_text_file(out / "train_log.tsv", train::format_log(result.log));
        py::list log;
        for (const auto& e : result.log) {
          log.append(py::make_tuple(e.epoch, e.lr, e.train_loss, e.val_loss, e.val_dsc, e.is_best));
        }
        return log;
      },
      py::arg("manifest"), py::arg("variant"), py::arg("out"), py::arg("priors") = std::map<std::string, std::filesystem::path>{},
      py::arg("net_config") = py::none(), py::arg("train_config") = py::none(),
      "Train one variant; writes best.ckpt and train_log.tsv under `out` and returns the per-epoch log.");

  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& manifest, const std::string& split,
         std::map<std::string, std::filesystem::path> priors) {
        const auto report = eval::run_eval(read_checkpoint(checkpoint), read_manifest(manifest), parse_split(split),
                                           priors_from(priors));
        py::dict out;
        out["variant"] = net::to_string(report.variant);
        out["global"] = summary(report.global);
        py::dict per;
        for (const auto& [tag, a] : report.per_scanner) per[py::str(tag.id)] = summary(a);
        out["per_scanner"] = per;
        out["text"] = eval::report_to_text(report);
        return out;
      },
      py::arg("checkpoint"), py::arg("manifest"), py::arg("split"),
      py::arg("priors") = std::map<std::string, std::filesystem::path>{});
}
