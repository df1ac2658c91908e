#include "dwp/volume.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "binary_io.hpp"

namespace dwp {

const char* to_string(FormatErrc code) {
    switch (code) {
        case FormatErrc::io_error: return "io error";
        case FormatErrc::bad_magic: return "bad magic";
        case FormatErrc::truncated: return "truncated";
        case FormatErrc::bad_header: return "bad header";
        case FormatErrc::payload_size_mismatch: return "payload size mismatch";
        case FormatErrc::bad_payload: return "bad payload";
    }
    return "unknown";
}

const char* to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain parse_domain(const std::string& s) {
    if (s == "source") return Domain::source;
    if (s == "target") return Domain::target;
    throw std::invalid_argument("unknown domain '" + s + "' (expected source|target)");
}

double Volume::foreground_fraction() const {
    std::size_t n = 0;
    for (auto m : mask) n += m;
    return mask.empty() ? 0.0 : static_cast<double>(n) / static_cast<double>(mask.size());
}

void Volume::validate() const {
    const std::size_t n = voxel_count();
    if (n == 0) throw std::invalid_argument("volume '" + id + "' has an empty grid");
    if (intensities.size() != n || mask.size() != n) {
        throw std::invalid_argument("volume '" + id + "': intensity/mask sizes do not match dims");
    }
    for (float x : intensities) {
        if (!(x >= 0.0f && x <= 1.0f)) throw std::invalid_argument("volume '" + id + "': intensity outside [0,1]");
    }
    for (auto m : mask) {
        if (m > 1) throw std::invalid_argument("volume '" + id + "': mask is not binary");
    }
}

namespace {

struct DomainStyle {
    double base, field_amp, fine_noise, gamma;
    int min_lesions, max_lesions;
    double min_radius, max_radius, contrast;
};

// Lesion size/contrast/gamma encode the source/target gap; texture and noise processes are shared.
constexpr DomainStyle kSourceStyle{0.40, 0.10, 0.03, 1.00, 3, 8, 1.0, 3.0, 0.35};
constexpr DomainStyle kTargetStyle{0.35, 0.10, 0.03, 0.75, 1, 2, 4.0, 8.0, 0.20};
constexpr double kTextureAmp = 0.25;

// Separable box blur with edge clamping.
void box_blur(std::vector<double>& f, const Dims& dims, int radius) {
    const std::size_t d = dims[0], h = dims[1], w = dims[2];
    const std::size_t strides[3] = {h * w, w, 1};
    std::vector<double> line, out;
    for (int axis = 0; axis < 3; ++axis) {
        const std::size_t len = dims[axis];
        const std::size_t stride = strides[axis];
        line.resize(len);
        out.resize(len);
        for (std::size_t base = 0; base < d * h * w; ++base) {
            // `base` is a line start iff its coordinate along `axis` is zero.
            if ((base / stride) % len != 0) continue;
            for (std::size_t i = 0; i < len; ++i) line[i] = f[base + i * stride];
            for (std::size_t i = 0; i < len; ++i) {
                double s = 0.0;
                for (int o = -radius; o <= radius; ++o) {
                    const long j = std::clamp(static_cast<long>(i) + o, 0L, static_cast<long>(len) - 1);
                    s += line[static_cast<std::size_t>(j)];
                }
                out[i] = s / (2 * radius + 1);
            }
            for (std::size_t i = 0; i < len; ++i) f[base + i * stride] = out[i];
        }
    }
}

std::vector<double> smooth_noise(const Dims& dims, Rng& rng, int passes, int radius) {
    std::vector<double> f(dims[0] * dims[1] * dims[2]);
    fill_normal(std::span<double>(f), rng);
    for (int p = 0; p < passes; ++p) box_blur(f, dims, radius);
    double mean = 0.0;
    for (double x : f) mean += x;
    mean /= static_cast<double>(f.size());
    double var = 0.0;
    for (double x : f) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / static_cast<double>(f.size()));
    for (double& x : f) x = (x - mean) / (sd > 0 ? sd : 1.0);
    return f;
}

Volume draw_volume(Domain domain, const Dims& dims, Rng& rng) {
    const DomainStyle& st = domain == Domain::source ? kSourceStyle : kTargetStyle;
    const std::size_t n = dims[0] * dims[1] * dims[2];
    const auto field = smooth_noise(dims, rng, 3, 2);
    const auto texture = smooth_noise(dims, rng, 1, 1);
    std::vector<double> fine(n);
    fill_normal(std::span<double>(fine), rng);

    std::vector<double> lesion(n, 0.0);
    std::vector<std::uint8_t> mask(n, 0);
    std::uniform_int_distribution<int> count_dist(st.min_lesions, st.max_lesions);
    std::uniform_real_distribution<double> radius_dist(st.min_radius, st.max_radius);
    const int count = count_dist(rng);
    for (int l = 0; l < count; ++l) {
        double r[3];
        long c[3];
        for (int a = 0; a < 3; ++a) r[a] = radius_dist(rng);
        for (int a = 0; a < 3; ++a) {
            const long margin = static_cast<long>(std::ceil(r[a]));
            const long hi = std::max(margin, static_cast<long>(dims[a]) - 1 - margin);
            c[a] = std::uniform_int_distribution<long>(margin, hi)(rng);
        }
        long lo[3], hi[3];
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::max(0L, c[a] - static_cast<long>(std::ceil(r[a])));
            hi[a] = std::min(static_cast<long>(dims[a]) - 1, c[a] + static_cast<long>(std::ceil(r[a])));
        }
        for (long z = lo[0]; z <= hi[0]; ++z) {
            for (long y = lo[1]; y <= hi[1]; ++y) {
                for (long x = lo[2]; x <= hi[2]; ++x) {
                    const double q = std::pow((z - c[0]) / r[0], 2) + std::pow((y - c[1]) / r[1], 2) +
                                     std::pow((x - c[2]) / r[2], 2);
                    if (q <= 1.0) {
                        const std::size_t idx = (static_cast<std::size_t>(z) * dims[1] + y) * dims[2] + x;
                        mask[idx] = 1;
                        lesion[idx] = 1.0;
                    }
                }
            }
        }
    }
    // Soft lesion boundary.
    box_blur(lesion, dims, 1);

    Volume v;
    v.dims = dims;
    v.domain = domain;
    v.mask = std::move(mask);
    v.intensities.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double x = st.base + st.field_amp * field[i] + st.fine_noise * fine[i] +
                   st.contrast * lesion[i] * (1.0 + kTextureAmp * texture[i]);
        x = std::clamp(x, 0.0, 1.0);
        x = std::pow(x, st.gamma);
        v.intensities[i] = static_cast<float>(std::clamp(x, 0.0, 1.0));
    }
    return v;
}

}  // namespace

Volume gen_volume(Domain domain, Dims dims, Rng& rng, std::string id) {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < 16) {
            throw std::invalid_argument("gen_volume: every axis must be >= 16, got axis " + std::to_string(a) + " = " +
                                        std::to_string(dims[a]));
        }
    }
    constexpr int kMaxAttempts = 16;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        Volume v = draw_volume(domain, dims, rng);
        if (v.foreground_fraction() > 0.0) {
            v.id = std::move(id);
            return v;
        }
    }
    throw std::runtime_error("gen_volume: could not draw a nonempty mask");
}

Volume gen_volume(Domain domain, Dims dims, std::uint64_t master_seed, const std::string& id) {
    Rng rng = substream(master_seed, "volume/" + id);
    return gen_volume(domain, dims, rng, id);
}

void write_volume(const Volume& v, const std::filesystem::path& path) {
    v.validate();
    nlohmann::json header = {{"dims", {v.dims[0], v.dims[1], v.dims[2]}}, {"domain", to_string(v.domain)}, {"id", v.id}};
    std::string out = "MVOL1\n" + header.dump() + "\n";
    detail::append_f32_le(out, v.intensities);
    out.append(reinterpret_cast<const char*>(v.mask.data()), v.mask.size());
    detail::write_file(path, out);
}

Volume read_volume(const std::filesystem::path& path) {
    const std::string data = detail::read_file(path);
    const std::string what = "volume '" + path.string() + "'";
    std::size_t offset = 0;
    const std::string line = detail::split_header(data, "MVOL1\n", what, offset);
    Volume v;
    try {
        const auto header = nlohmann::json::parse(line);
        const auto& dims = header.at("dims");
        if (!dims.is_array() || dims.size() != 3) throw std::invalid_argument("dims must have 3 entries");
        for (int a = 0; a < 3; ++a) {
            const auto e = dims.at(a).get<long long>();
            if (e <= 0) throw std::invalid_argument("dims must be positive");
            v.dims[a] = static_cast<std::size_t>(e);
        }
        v.domain = parse_domain(header.at("domain").get<std::string>());
        v.id = header.at("id").get<std::string>();
    } catch (const std::exception& e) {
        throw FormatError(FormatErrc::bad_header, what + ": " + e.what());
    }
    const std::size_t n = v.voxel_count();
    const std::size_t expected = n * 5;
    const std::size_t actual = data.size() - offset;
    if (actual < expected && actual % 5 != 0) {
        throw FormatError(FormatErrc::truncated, what + ": payload ends mid-record after " + std::to_string(actual) +
                                                     " of " + std::to_string(expected) + " bytes");
    }
    if (actual != expected) {
        throw FormatError(FormatErrc::payload_size_mismatch, what + ": header dims need " + std::to_string(expected) +
                                                                 " payload bytes, found " + std::to_string(actual));
    }
    v.intensities.resize(n);
    detail::read_f32_le(data.data() + offset, v.intensities);
    const char* m = data.data() + offset + 4 * n;
    v.mask.assign(reinterpret_cast<const std::uint8_t*>(m), reinterpret_cast<const std::uint8_t*>(m) + n);
    try {
        v.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(FormatErrc::bad_payload, what + ": " + e.what());
    }
    return v;
}

template <typename T>
Tensor<T> volume_input(const Volume& v) {
    std::vector<T> vals(v.intensities.begin(), v.intensities.end());
    return Tensor<T>({1, 1, v.dims[0], v.dims[1], v.dims[2]}, std::move(vals));
}

template <typename T>
Tensor<T> volume_mask(const Volume& v) {
    std::vector<T> vals(v.mask.begin(), v.mask.end());
    return Tensor<T>({1, 1, v.dims[0], v.dims[1], v.dims[2]}, std::move(vals));
}

template Tensor<float> volume_input(const Volume&);
template Tensor<double> volume_input(const Volume&);
template Tensor<float> volume_mask(const Volume&);
template Tensor<double> volume_mask(const Volume&);

}  // namespace dwp
