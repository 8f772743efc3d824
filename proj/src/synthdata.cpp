#include "asfda/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include <json.hpp>

namespace asfda {

namespace {

std::string slice_name(int case_idx, int slice_idx) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "c%02d_s%02d", case_idx, slice_idx);
    return buf;
}

void write_spec_json(const DomainSpec& s, const std::filesystem::path& path,
                     const std::string& name) {
    nlohmann::ordered_json j;
    j["name"] = name;
    j["num_cases"] = s.num_cases;
    j["slices_per_case"] = s.slices_per_case;
    j["height"] = s.height;
    j["width"] = s.width;
    j["center_jitter"] = s.center_jitter;
    j["radius_y_range"] = s.radius_y_range;
    j["radius_x_range"] = s.radius_x_range;
    j["radius_floor"] = s.radius_floor;
    j["contrast_floor"] = s.contrast_floor;
    j["fg_mean"] = s.fg_mean;
    j["bg_mean"] = s.bg_mean;
    j["noise_sigma"] = s.noise_sigma;
    j["gamma"] = s.gamma;
    j["bias_strength"] = s.bias_strength;
    j["seed"] = s.seed;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw TensorIoError(TensorIoError::Kind::io, "cannot open " + path.string());
    f << j.dump(2) << '\n';
    if (!f.flush()) throw TensorIoError(TensorIoError::Kind::io, "write failed: " + path.string());
}

} // namespace

void DomainSpec::validate() const {
    if (num_cases < 1 || slices_per_case < 1)
        throw ConfigError("synth: need at least one case and one slice per case");
    if (height < 8 || width < 8) throw ConfigError("synth: image size must be at least 8");
    if (fg_mean == bg_mean) throw ConfigError("synth: fg_mean must differ from bg_mean");
    if (fg_mean < 0.0 || fg_mean > 1.0 || bg_mean < 0.0 || bg_mean > 1.0)
        throw ConfigError("synth: class means must lie in [0,1]");
    if (radius_y_range[0] < 1.0 || radius_y_range[0] > radius_y_range[1] ||
        radius_x_range[0] < 1.0 || radius_x_range[0] > radius_x_range[1])
        throw ConfigError("synth: radius ranges must satisfy 1 <= lo <= hi");
    const double fit_y = radius_y_range[1] + center_jitter;
    const double fit_x = radius_x_range[1] + center_jitter;
    if (fit_y > height / 2.0 - 1.0 || fit_x > width / 2.0 - 1.0)
        throw ConfigError("synth: ellipse plus jitter does not fit the image");
    if (radius_floor <= 0.0 || radius_floor > 1.0 || contrast_floor <= 0.0 || contrast_floor > 1.0)
        throw ConfigError("synth: profile floors must lie in (0,1]");
    if (noise_sigma < 0.0 || bias_strength < 0.0 || bias_strength >= 1.0)
        throw ConfigError("synth: noise_sigma must be >= 0 and bias_strength in [0,1)");
    if (gamma <= 0.0) throw ConfigError("synth: gamma must be > 0");
}

DatasetManifest generate(const DomainSpec& spec, const std::filesystem::path& out_dir,
                         const std::string& name) {
    spec.validate();
    std::filesystem::create_directories(out_dir);
    const std::filesystem::path abs_out = std::filesystem::absolute(out_dir);

    const int H = spec.height, W = spec.width, S = spec.slices_per_case;
    DatasetManifest m;
    m.name = name;
    m.domain_tag = name;
    m.num_classes = 2;

    for (int c = 0; c < spec.num_cases; ++c) {
        Rng rng(derive_seed(spec.seed, "case-" + std::to_string(c)));
        const double cy = H / 2.0 + rng.uniform_range(-spec.center_jitter, spec.center_jitter);
        const double cx = W / 2.0 + rng.uniform_range(-spec.center_jitter, spec.center_jitter);
        const double ry = rng.uniform_range(spec.radius_y_range[0], spec.radius_y_range[1]);
        const double rx = rng.uniform_range(spec.radius_x_range[0], spec.radius_x_range[1]);
        const std::string case_id = "c" + std::string(c < 10 ? "0" : "") + std::to_string(c);

        for (int s = 0; s < S; ++s) {
            // Mid-case slices get the full ellipse and contrast; the ends
            // shrink toward the floors (the ambiguous apex/base slices).
            const double z = (s + 0.5) / static_cast<double>(S);
            const double bell = std::sin(M_PI * z);
            const double r_scale = spec.radius_floor + (1.0 - spec.radius_floor) * bell;
            const double c_scale = spec.contrast_floor + (1.0 - spec.contrast_floor) * bell;
            const double sry = ry * r_scale, srx = rx * r_scale;
            const double fg_level = spec.bg_mean + (spec.fg_mean - spec.bg_mean) * c_scale;

            const double phi1 = rng.uniform_range(0.0, 2.0 * M_PI);
            const double phi2 = rng.uniform_range(0.0, 2.0 * M_PI);

            Tensor label = Tensor::zeros_u8({static_cast<std::uint32_t>(H),
                                             static_cast<std::uint32_t>(W)});
            std::vector<double> img(static_cast<std::size_t>(H) * W);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const double dy = (y - cy) / sry, dx = (x - cx) / srx;
                    const bool fg = dy * dy + dx * dx <= 1.0;
                    label.bytes()[y * W + x] = fg;
                    const double bias = 1.0 + spec.bias_strength *
                                                  std::sin(2.0 * M_PI * y / H + phi1) *
                                                  std::sin(2.0 * M_PI * x / W + phi2);
                    img[y * W + x] = (fg ? fg_level : spec.bg_mean) * bias;
                }
            if (spec.noise_sigma > 0.0)
                for (double& v : img) v += spec.noise_sigma * rng.normal();
            for (double& v : img) v = std::pow(std::clamp(v, 0.0, 1.0), spec.gamma);

            const auto [lo_it, hi_it] = std::minmax_element(img.begin(), img.end());
            const double lo = *lo_it, range = *hi_it - *lo_it;
            Tensor image = Tensor::zeros_f32({static_cast<std::uint32_t>(H),
                                              static_cast<std::uint32_t>(W)});
            for (std::size_t i = 0; i < img.size(); ++i)
                image.floats()[i] =
                    range > 1e-12 ? static_cast<float>((img[i] - lo) / range) : 0.0f;

            const std::string id = slice_name(c, s);
            write_tensor(out_dir / (id + ".img.ugts"), image);
            write_tensor(out_dir / (id + ".lbl.ugts"), label);

            SliceRef ref;
            ref.id = id;
            ref.case_id = case_id;
            ref.index_in_case = s;
            ref.image_path = abs_out / (id + ".img.ugts");
            ref.label_path = abs_out / (id + ".lbl.ugts");
            m.slices.push_back(std::move(ref));
        }
    }

    save_manifest(out_dir / "manifest.json", m);
    write_spec_json(spec, out_dir / "spec.json", name);
    return load_manifest(out_dir / "manifest.json");
}

std::pair<DomainSpec, DomainSpec> default_shift_pair(std::uint64_t seed, double magnitude) {
    if (magnitude < 0.0 || magnitude > 1.0)
        throw ConfigError("synth.shift_magnitude must lie in [0,1]");
    DomainSpec src;
    src.seed = derive_seed(seed, "synth-pair");

    DomainSpec tgt = src;
    tgt.gamma = 1.0 - 0.4 * magnitude;
    tgt.fg_mean = src.bg_mean + (src.fg_mean - src.bg_mean) * (1.0 - 0.5 * magnitude);
    tgt.noise_sigma = src.noise_sigma * (1.0 + magnitude);
    tgt.bias_strength = src.bias_strength * (1.0 + 2.0 * magnitude);
    return {src, tgt};
}

} // namespace asfda
