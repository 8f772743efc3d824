#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "asfda/common.hpp"

namespace asfda {

enum class Dtype : std::uint8_t { f32 = 0, u8 = 1 };

// ---------------------------------------------------------------------------
// Tensor: dense row-major array, float32 or uint8, positive extents only.
// Immutable by convention once handed off; cheap to copy at desk scale.
// ---------------------------------------------------------------------------
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros_f32(std::vector<std::uint32_t> dims);
    static Tensor zeros_u8(std::vector<std::uint32_t> dims);
    static Tensor from_f32(std::vector<std::uint32_t> dims, std::vector<float> data);
    static Tensor from_u8(std::vector<std::uint32_t> dims, std::vector<std::uint8_t> data);

    Dtype dtype() const { return dtype_; }
    const std::vector<std::uint32_t>& dims() const { return dims_; }
    std::size_t rank() const { return dims_.size(); }
    std::size_t size() const;

    std::span<const float> floats() const { return f32_; }
    std::span<float> floats() { return f32_; }
    std::span<const std::uint8_t> bytes() const { return u8_; }
    std::span<std::uint8_t> bytes() { return u8_; }

    // 2D accessors (row, col) and 3D accessors (chan, row, col).
    float& at(std::size_t r, std::size_t c) { return f32_[r * dims_[1] + c]; }
    float at(std::size_t r, std::size_t c) const { return f32_[r * dims_[1] + c]; }
    float& at(std::size_t ch, std::size_t r, std::size_t c) {
        return f32_[(ch * dims_[1] + r) * dims_[2] + c];
    }
    float at(std::size_t ch, std::size_t r, std::size_t c) const {
        return f32_[(ch * dims_[1] + r) * dims_[2] + c];
    }
    std::uint8_t& byte_at(std::size_t r, std::size_t c) { return u8_[r * dims_[1] + c]; }
    std::uint8_t byte_at(std::size_t r, std::size_t c) const { return u8_[r * dims_[1] + c]; }

    bool same_dims(const Tensor& other) const { return dims_ == other.dims_; }

    /// Checks extents are positive, buffer length matches, floats finite.
    void validate() const;

private:
    std::vector<std::uint32_t> dims_;
    Dtype dtype_ = Dtype::f32;
    std::vector<float> f32_;
    std::vector<std::uint8_t> u8_;
};

/// Ensemble probability map, C×H×W, per-pixel class vectors summing to 1.
using EnsembleProb = Tensor;

// ---------------------------------------------------------------------------
// Container format: magic "UGTS", version byte, dtype code byte, ndim byte,
// ndim little-endian u32 extents, then the raw little-endian row-major
// payload. Round-trips bit-exactly.
// ---------------------------------------------------------------------------

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

// In-memory codec used by both file ops and the round-trip tests.
std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& origin);

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

/// One slice as listed in a manifest: paths only, data loaded on demand.
struct SliceRef {
    std::string id;
    std::string case_id;
    int index_in_case = 0;
    std::filesystem::path image_path;                 // absolute after load
    std::optional<std::filesystem::path> label_path;  // absent for unlabeled slices

    bool labeled() const { return label_path.has_value(); }
};

/// A loaded slice: grayscale image in [0,1], optional class-id label mask.
struct TargetSlice {
    std::string id;
    std::string case_id;
    int index_in_case = 0;
    Tensor image;                  // H×W f32
    std::optional<Tensor> label;   // H×W u8
};

struct DatasetManifest {
    std::string name;
    std::string domain_tag;
    int num_classes = 2;
    std::vector<SliceRef> slices;  // ordered by (case_id, index_in_case)

    const SliceRef& find(const std::string& id) const;
};

/// Parses and validates a manifest JSON document. Image/label files are
/// opened eagerly to catch missing files, dim mismatches, out-of-range
/// values and bad labels up front; payloads are not retained.
DatasetManifest load_manifest(const std::filesystem::path& path);

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);

/// Loads image and (when present and requested) label for one slice.
TargetSlice load_slice(const SliceRef& ref, bool with_label = true);

} // namespace asfda
