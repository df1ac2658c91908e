#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "dwp/experiments.hpp"
#include "dwp/io_error.hpp"
#include "dwp/loss.hpp"
#include "dwp/unet.hpp"

namespace py = pybind11;

namespace {

py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

py::tuple volume_arrays(const dwp::Volume& v) {
    const std::vector<py::ssize_t> shape{static_cast<py::ssize_t>(v.dims[0]), static_cast<py::ssize_t>(v.dims[1]),
                                         static_cast<py::ssize_t>(v.dims[2])};
    py::array_t<float> image(shape);
    py::array_t<std::uint8_t> mask(shape);
    std::copy(v.intensities.begin(), v.intensities.end(), image.mutable_data());
    std::copy(v.mask.begin(), v.mask.end(), mask.mutable_data());
    return py::make_tuple(image, mask);
}

std::vector<float> flat(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
    return {a.data(), a.data() + a.size()};
}

std::vector<std::uint8_t> flat_mask(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
    return {a.data(), a.data() + a.size()};
}

}  // namespace

PYBIND11_MODULE(_dwpseg, m) {
    m.doc() = "Deep weight prior segmentation core";
    m.def("version", &dwp::version_string);

    m.def("unet_param_count", [](int levels, int base_channels, int in_channels) {
        return dwp::unet_param_count({levels, base_channels, in_channels});
    }, py::arg("levels") = 3, py::arg("base_channels") = 8, py::arg("in_channels") = 1);

    m.def("generate_volume", [](const std::string& domain, const dwp::Dims& dims, std::uint64_t seed, const std::string& id) {
        return volume_arrays(dwp::gen_volume(dwp::parse_domain(domain), dims, seed, id));
    }, py::arg("domain"), py::arg("dims"), py::arg("seed"), py::arg("id"),
          "Synthetic (intensities, mask) pair as float32 and uint8 arrays of shape dims.");

    m.def("read_volume", [](const std::filesystem::path& p) { return volume_arrays(dwp::read_volume(p)); });

    m.def("dice", [](const py::array_t<float, py::array::c_style | py::array::forcecast>& prob,
                     const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& mask) {
        return dwp::dice_metric(flat(prob), flat_mask(mask));
    });
    m.def("iou", [](const py::array_t<float, py::array::c_style | py::array::forcecast>& prob,
                    const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& mask) {
        return dwp::iou_metric(flat(prob), flat_mask(mask));
    });

    m.def("make_splits", [](const std::vector<std::string>& pool, int train_size, int test_size, std::uint64_t seed) {
        const auto s = dwp::make_splits(pool, train_size, test_size, seed);
        return py::make_tuple(s.train_ids, s.test_ids);
    });

    m.def("default_config", [] { return to_python(dwp::to_json(dwp::MasterConfig{})); });
    m.def("load_config", [](const std::filesystem::path& p) { return to_python(dwp::to_json(dwp::load_config(p))); },
          "Validated config with defaults filled in.");

    m.def("sample_prior", [](const std::filesystem::path& prior, std::size_t n, std::uint64_t seed) {
        const auto bank = dwp::read_prior_bank(prior);
        dwp::Rng rng = dwp::substream(seed, "sample-prior");
        const auto ks = dwp::sample_kernels(bank.priors.front(), n, rng);
        py::array_t<float> out({static_cast<py::ssize_t>(n), py::ssize_t{3}, py::ssize_t{3}, py::ssize_t{3}});
        for (std::size_t i = 0; i < n; ++i) std::copy(ks[i].values.begin(), ks[i].values.end(), out.mutable_data() + i * 27);
        return out;
    }, py::arg("prior"), py::arg("n") = 64, py::arg("seed") = 1);

    m.def("run_table", [](const std::filesystem::path& config, const std::filesystem::path& out) {
        const auto r = dwp::run_table(dwp::load_config(config), out);
        return py::make_tuple(r.records.size(), r.failures);
    }, py::call_guard<py::gil_scoped_release>());

    py::register_exception<dwp::ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<dwp::FormatError>(m, "FormatError", PyExc_IOError);
    py::register_exception<dwp::MissingArtifactError>(m, "MissingArtifactError", PyExc_FileNotFoundError);
}
