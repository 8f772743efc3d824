#include "asfda/tensorio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace asfda {

namespace {

constexpr char kMagic[4] = {'U', 'G', 'T', 'S'};
constexpr std::uint8_t kVersion = 1;

std::size_t checked_size(const std::vector<std::uint32_t>& dims) {
    if (dims.empty())
        throw TensorIoError(TensorIoError::Kind::bad_shape, "tensor must have at least one dim");
    std::size_t n = 1;
    for (auto d : dims) {
        if (d == 0)
            throw TensorIoError(TensorIoError::Kind::bad_shape, "zero extent rejected");
        n *= d;
    }
    return n;
}

void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

std::uint32_t get_u32le(std::span<const std::uint8_t> b, std::size_t off) {
    return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
           (static_cast<std::uint32_t>(b[off + 2]) << 16) |
           (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

} // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

std::size_t Tensor::size() const {
    std::size_t n = 1;
    for (auto d : dims_) n *= d;
    return dims_.empty() ? 0 : n;
}

Tensor Tensor::zeros_f32(std::vector<std::uint32_t> dims) {
    const std::size_t n = checked_size(dims);
    Tensor t;
    t.dims_ = std::move(dims);
    t.dtype_ = Dtype::f32;
    t.f32_.assign(n, 0.0f);
    return t;
}

Tensor Tensor::zeros_u8(std::vector<std::uint32_t> dims) {
    const std::size_t n = checked_size(dims);
    Tensor t;
    t.dims_ = std::move(dims);
    t.dtype_ = Dtype::u8;
    t.u8_.assign(n, 0);
    return t;
}

Tensor Tensor::from_f32(std::vector<std::uint32_t> dims, std::vector<float> data) {
    const std::size_t n = checked_size(dims);
    if (data.size() != n)
        throw TensorIoError(TensorIoError::Kind::bad_shape, "payload length does not match dims");
    Tensor t;
    t.dims_ = std::move(dims);
    t.dtype_ = Dtype::f32;
    t.f32_ = std::move(data);
    return t;
}

Tensor Tensor::from_u8(std::vector<std::uint32_t> dims, std::vector<std::uint8_t> data) {
    const std::size_t n = checked_size(dims);
    if (data.size() != n)
        throw TensorIoError(TensorIoError::Kind::bad_shape, "payload length does not match dims");
    Tensor t;
    t.dims_ = std::move(dims);
    t.dtype_ = Dtype::u8;
    t.u8_ = std::move(data);
    return t;
}

void Tensor::validate() const {
    const std::size_t n = checked_size(dims_);
    if (dtype_ == Dtype::f32) {
        if (f32_.size() != n)
            throw TensorIoError(TensorIoError::Kind::bad_shape, "payload length does not match dims");
        for (float v : f32_)
            if (!std::isfinite(v))
                throw TensorIoError(TensorIoError::Kind::non_finite,
                                    "float32 payload contains NaN or infinity");
    } else {
        if (u8_.size() != n)
            throw TensorIoError(TensorIoError::Kind::bad_shape, "payload length does not match dims");
    }
}

// ---------------------------------------------------------------------------
// Codec
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    t.validate();
    if (t.rank() > 255)
        throw TensorIoError(TensorIoError::Kind::bad_shape, "rank exceeds container limit");

    std::vector<std::uint8_t> out;
    out.reserve(7 + 4 * t.rank() + t.size() * (t.dtype() == Dtype::f32 ? 4 : 1));
    out.insert(out.end(), kMagic, kMagic + 4);
    out.push_back(kVersion);
    out.push_back(static_cast<std::uint8_t>(t.dtype()));
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.dims()) put_u32le(out, d);

    if (t.dtype() == Dtype::f32) {
        for (float v : t.floats()) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32le(out, bits);
        }
    } else {
        out.insert(out.end(), t.bytes().begin(), t.bytes().end());
    }
    return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> b, const std::string& origin) {
    auto fail = [&](TensorIoError::Kind k, const std::string& what) {
        throw TensorIoError(k, what + ": " + origin);
    };

    if (b.size() < 7) fail(TensorIoError::Kind::truncated, "file shorter than header");
    if (std::memcmp(b.data(), kMagic, 4) != 0) fail(TensorIoError::Kind::bad_magic, "bad magic");
    if (b[4] != kVersion) fail(TensorIoError::Kind::bad_version, "unsupported version");
    if (b[5] > 1) fail(TensorIoError::Kind::bad_dtype, "unknown dtype code");
    const Dtype dtype = static_cast<Dtype>(b[5]);
    const std::size_t ndim = b[6];
    if (ndim == 0) fail(TensorIoError::Kind::bad_shape, "zero-rank tensor");
    if (b.size() < 7 + 4 * ndim) fail(TensorIoError::Kind::truncated, "header truncated");

    std::vector<std::uint32_t> dims(ndim);
    std::size_t n = 1;
    for (std::size_t i = 0; i < ndim; ++i) {
        dims[i] = get_u32le(b, 7 + 4 * i);
        if (dims[i] == 0) fail(TensorIoError::Kind::bad_shape, "zero extent rejected");
        n *= dims[i];
    }

    const std::size_t off = 7 + 4 * ndim;
    const std::size_t payload = b.size() - off;
    if (dtype == Dtype::f32) {
        if (payload != 4 * n) fail(TensorIoError::Kind::truncated, "payload length mismatch");
        std::vector<float> data(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint32_t bits = get_u32le(b, off + 4 * i);
            float v;
            std::memcpy(&v, &bits, 4);
            if (!std::isfinite(v))
                fail(TensorIoError::Kind::non_finite, "float32 payload contains NaN or infinity");
            data[i] = v;
        }
        return Tensor::from_f32(std::move(dims), std::move(data));
    }
    if (payload != n) fail(TensorIoError::Kind::truncated, "payload length mismatch");
    return Tensor::from_u8(std::move(dims), std::vector<std::uint8_t>(b.begin() + off, b.end()));
}

void write_tensor(const fs::path& path, const Tensor& t) {
    const auto bytes = encode_tensor(t);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f)
        throw TensorIoError(TensorIoError::Kind::io, "cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f)
        throw TensorIoError(TensorIoError::Kind::io, "write failed: " + path.string());
}

Tensor read_tensor(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw TensorIoError(TensorIoError::Kind::io, "cannot open for reading: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return decode_tensor(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

const SliceRef& DatasetManifest::find(const std::string& id) const {
    for (const auto& s : slices)
        if (s.id == id) return s;
    throw ManifestError("slice id not in manifest: " + id);
}

TargetSlice load_slice(const SliceRef& ref, bool with_label) {
    TargetSlice s;
    s.id = ref.id;
    s.case_id = ref.case_id;
    s.index_in_case = ref.index_in_case;
    s.image = read_tensor(ref.image_path);
    if (with_label && ref.label_path) s.label = read_tensor(*ref.label_path);
    return s;
}

DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw ManifestError("cannot open manifest: " + path.string());
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::exception& e) {
        throw ManifestError("manifest is not valid JSON: " + path.string() + ": " + e.what());
    }

    DatasetManifest m;
    try {
        m.name = doc.at("name").get<std::string>();
        m.domain_tag = doc.at("domain_tag").get<std::string>();
        m.num_classes = doc.at("num_classes").get<int>();
        const auto& slices = doc.at("slices");
        const fs::path base = path.parent_path();
        for (const auto& s : slices) {
            SliceRef r;
            r.id = s.at("id").get<std::string>();
            r.case_id = s.at("case_id").get<std::string>();
            r.index_in_case = s.at("index_in_case").get<int>();
            std::string img = s.at("image").get<std::string>();
            if (img.empty())
                throw ManifestError("empty image path for slice: " + r.id);
            r.image_path = base / img;
            if (!s.at("label").is_null()) {
                std::string lbl = s.at("label").get<std::string>();
                if (lbl.empty())
                    throw ManifestError("empty label path for slice: " + r.id);
                r.label_path = base / lbl;
            }
            m.slices.push_back(std::move(r));
        }
    } catch (const json::exception& e) {
        throw ManifestError("manifest schema error: " + path.string() + ": " + e.what());
    }

    if (m.num_classes < 2) throw ManifestError("num_classes must be >= 2");

    // Deterministic order regardless of how the file lists slices.
    std::stable_sort(m.slices.begin(), m.slices.end(), [](const SliceRef& a, const SliceRef& b) {
        return std::tie(a.case_id, a.index_in_case, a.id) < std::tie(b.case_id, b.index_in_case, b.id);
    });

    std::set<std::string> seen;
    std::vector<std::string> dup, missing, mismatch, bad_values;
    for (const auto& r : m.slices) {
        if (!seen.insert(r.id).second) dup.push_back(r.id);
        if (r.index_in_case < 0) bad_values.push_back(r.id);

        if (!fs::is_regular_file(r.image_path) ||
            (r.label_path && !fs::is_regular_file(*r.label_path))) {
            missing.push_back(r.id);
            continue;
        }
        Tensor img = read_tensor(r.image_path);
        if (img.rank() != 2 || img.dtype() != Dtype::f32) {
            bad_values.push_back(r.id);
            continue;
        }
        for (float v : img.floats())
            if (v < 0.0f || v > 1.0f) {
                bad_values.push_back(r.id);
                break;
            }
        if (r.label_path) {
            Tensor lbl = read_tensor(*r.label_path);
            if (lbl.dtype() != Dtype::u8 || !lbl.same_dims(img)) {
                mismatch.push_back(r.id);
                continue;
            }
            for (auto v : lbl.bytes())
                if (v >= m.num_classes) {
                    bad_values.push_back(r.id);
                    break;
                }
        }
    }

    auto join = [](const std::vector<std::string>& v) {
        std::string out;
        for (const auto& s : v) out += (out.empty() ? "" : ", ") + s;
        return out;
    };
    if (!dup.empty()) throw ManifestError("duplicate slice ids: " + join(dup));
    if (!missing.empty()) throw ManifestError("missing image/label files for slices: " + join(missing));
    if (!mismatch.empty())
        throw ManifestError("label/image dim or dtype mismatch for slices: " + join(mismatch));
    if (!bad_values.empty())
        throw ManifestError("out-of-range values or bad shapes for slices: " + join(bad_values));

    return m;
}

void save_manifest(const fs::path& path, const DatasetManifest& m) {
    const fs::path base = path.parent_path();
    // Relative slice paths are taken as already manifest-relative; absolute
    // ones are rewritten relative to the manifest's directory when possible.
    auto rel = [&base](const fs::path& p) {
        if (p.is_relative()) return p.generic_string();
        std::error_code ec;
        fs::path r = fs::relative(p, base, ec);
        return (ec || r.empty()) ? p.generic_string() : r.generic_string();
    };
    json doc;
    doc["name"] = m.name;
    doc["domain_tag"] = m.domain_tag;
    doc["num_classes"] = m.num_classes;
    doc["slices"] = json::array();
    for (const auto& s : m.slices) {
        json row;
        row["id"] = s.id;
        row["case_id"] = s.case_id;
        row["index_in_case"] = s.index_in_case;
        row["image"] = rel(s.image_path);
        if (s.label_path)
            row["label"] = rel(*s.label_path);
        else
            row["label"] = nullptr;
        doc["slices"].push_back(std::move(row));
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ManifestError("cannot write manifest: " + path.string());
    f << doc.dump(2) << "\n";
}

} // namespace asfda
