#pragma once

#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sflow/error.hpp"
#include "sflow/geometry.hpp"

namespace sflow {

static_assert(std::endian::native == std::endian::little,
              "SFPC/SFCK encoders assume a little-endian host");

/// One lidar sweep in its sensor frame.
struct PointCloud {
    Points points;
    std::int64_t frame_index = 0;
    std::optional<Labels> gt_labels;  // 0 = background
    std::optional<Points> gt_flow;    // meters per frame interval

    std::size_t size() const { return points.size(); }

    /// Throws InvalidCloud / NonFiniteCoordinate / LengthMismatch.
    void validate() const {
        if (points.empty()) throw Error(ErrorCode::InvalidCloud, "cloud has no points");
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (!points[i].allFinite())
                throw Error(ErrorCode::NonFiniteCoordinate, "point " + std::to_string(i));
        }
        if (gt_labels && gt_labels->size() != points.size())
            throw Error(ErrorCode::LengthMismatch, "gt_labels length differs from point count");
        if (gt_flow && gt_flow->size() != points.size())
            throw Error(ErrorCode::LengthMismatch, "gt_flow length differs from point count");
        if (gt_labels) {
            for (int l : *gt_labels)
                if (l < 0) throw Error(ErrorCode::InvalidCloud, "negative instance label");
        }
    }
};

enum class FlowKind { Ego, Residual, Total };

struct FlowField {
    Points vectors;
    FlowKind kind = FlowKind::Total;

    std::size_t size() const { return vectors.size(); }
};

/// Elementwise ego + residual. The evaluation order is fixed so the identity
/// total - ego - residual == 0 holds bit-for-bit.
inline FlowField compose_flow(const FlowField& ego, const FlowField& residual) {
    if (ego.size() != residual.size())
        throw Error(ErrorCode::LengthMismatch, "ego and residual flow lengths differ");
    FlowField total{Points(ego.size()), FlowKind::Total};
    for (std::size_t i = 0; i < ego.size(); ++i) total.vectors[i] = ego.vectors[i] + residual.vectors[i];
    return total;
}

/// N x C unnormalized class scores; channel 0 is background.
struct MaskLogits {
    Eigen::MatrixXd values;

    Eigen::Index rows() const { return values.rows(); }
    Eigen::Index channels() const { return values.cols(); }
};

/// Frames t and t+1. ego_pose_hint maps source-frame coordinates into the
/// target sensor frame.
struct FramePair {
    PointCloud source;
    PointCloud target;
    std::optional<RigidTransform> ego_pose_hint;

    void validate() const {
        source.validate();
        target.validate();
        if (source.frame_index + 1 != target.frame_index)
            throw Error(ErrorCode::InvalidArgument, "target.frame_index must equal source.frame_index + 1");
    }
};

// ---------------------------------------------------------------------------
// SFPC binary format
//
//   "SFPC" | u32 version=1 | u32 N | u8 flags | N*3 f32 xyz
//   | [N u32 labels if flags&1] | [N*3 f32 flow if flags&2]
//
// All fields little-endian, no padding.
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kFrameMagic = {'S', 'F', 'P', 'C'};
inline constexpr std::uint32_t kFrameVersion = 1;
inline constexpr std::uint8_t kFlagLabels = 0x1;
inline constexpr std::uint8_t kFlagFlow = 0x2;
inline constexpr std::size_t kFrameHeaderBytes = 4 + 4 + 4 + 1;

namespace detail {

class ByteWriter {
public:
    void raw(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        bytes_.insert(bytes_.end(), p, p + n);
    }
    template <class T>
    void put(T v) {
        raw(&v, sizeof(T));
    }
    std::vector<std::uint8_t>& bytes() { return bytes_; }

private:
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    template <class T>
    T get() {
        T v;
        if (offset_ + sizeof(T) > bytes_.size())
            throw Error(ErrorCode::TruncatedFile, "need " + std::to_string(sizeof(T)) +
                                                      " bytes at offset " + std::to_string(offset_));
        std::memcpy(&v, bytes_.data() + offset_, sizeof(T));
        offset_ += sizeof(T);
        return v;
    }
    void raw(void* out, std::size_t n) {
        if (offset_ + n > bytes_.size())
            throw Error(ErrorCode::TruncatedFile,
                        "need " + std::to_string(n) + " bytes at offset " + std::to_string(offset_));
        std::memcpy(out, bytes_.data() + offset_, n);
        offset_ += n;
    }
    std::size_t offset() const { return offset_; }
    std::size_t remaining() const { return bytes_.size() - offset_; }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t offset_ = 0;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.empty()) throw Error(ErrorCode::IoFailure, "empty output path");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

inline bool has_csv_extension(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return ext == ".csv";
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_frame(const PointCloud& cloud) {
    cloud.validate();
    detail::ByteWriter w;
    w.raw(kFrameMagic.data(), kFrameMagic.size());
    w.put<std::uint32_t>(kFrameVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(cloud.size()));
    std::uint8_t flags = 0;
    if (cloud.gt_labels) flags |= kFlagLabels;
    if (cloud.gt_flow) flags |= kFlagFlow;
    w.put<std::uint8_t>(flags);
    for (const auto& p : cloud.points)
        for (int k = 0; k < 3; ++k) w.put<float>(static_cast<float>(p[k]));
    if (cloud.gt_labels)
        for (int l : *cloud.gt_labels) w.put<std::uint32_t>(static_cast<std::uint32_t>(l));
    if (cloud.gt_flow)
        for (const auto& f : *cloud.gt_flow)
            for (int k = 0; k < 3; ++k) w.put<float>(static_cast<float>(f[k]));
    return std::move(w.bytes());
}

inline PointCloud decode_frame(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader r(bytes);
    std::array<char, 4> magic{};
    if (bytes.size() < magic.size() || (r.raw(magic.data(), magic.size()), magic != kFrameMagic))
        throw Error(ErrorCode::BadMagic, "expected \"SFPC\" at offset 0");
    const auto version = r.get<std::uint32_t>();
    if (version != kFrameVersion)
        throw Error(ErrorCode::BadMagic, "unsupported version " + std::to_string(version) + " at offset 4");
    const auto n = r.get<std::uint32_t>();
    const auto flags = r.get<std::uint8_t>();

    PointCloud cloud;
    cloud.points.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::size_t at = r.offset();
        for (int k = 0; k < 3; ++k) cloud.points[i][k] = r.get<float>();
        if (!cloud.points[i].allFinite())
            throw Error(ErrorCode::NonFiniteCoordinate, "point " + std::to_string(i) + " at offset " +
                                                            std::to_string(at));
    }
    if (flags & kFlagLabels) {
        Labels labels(n);
        for (std::uint32_t i = 0; i < n; ++i) labels[i] = static_cast<int>(r.get<std::uint32_t>());
        cloud.gt_labels = std::move(labels);
    }
    if (flags & kFlagFlow) {
        Points flow(n);
        for (std::uint32_t i = 0; i < n; ++i) {
            const std::size_t at = r.offset();
            for (int k = 0; k < 3; ++k) flow[i][k] = r.get<float>();
            if (!flow[i].allFinite())
                throw Error(ErrorCode::NonFiniteCoordinate, "flow " + std::to_string(i) + " at offset " +
                                                                std::to_string(at));
        }
        cloud.gt_flow = std::move(flow);
    }
    if (n == 0) throw Error(ErrorCode::InvalidCloud, "header declares zero points at offset 8");
    return cloud;
}

/// CSV debug format: one "x,y,z[,label]" row per point. Labels must be
/// present on every row or on none.
inline PointCloud read_csv_frame(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
    PointCloud cloud;
    Labels labels;
    std::string line;
    std::size_t row = 0;
    std::optional<bool> with_labels;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 3 && cells.size() != 4)
            throw Error(ErrorCode::InvalidCloud, "row " + std::to_string(row) + ": expected 3 or 4 fields");
        const bool has_label = cells.size() == 4;
        if (with_labels && *with_labels != has_label)
            throw Error(ErrorCode::InvalidCloud, "row " + std::to_string(row) + ": inconsistent label column");
        with_labels = has_label;
        Vec3 p;
        try {
            for (int k = 0; k < 3; ++k) p[k] = std::stod(cells[k]);
            if (has_label) labels.push_back(std::stoi(cells[3]));
        } catch (const std::logic_error&) {
            throw Error(ErrorCode::InvalidCloud, "row " + std::to_string(row) + ": unparsable number");
        }
        if (!p.allFinite()) throw Error(ErrorCode::NonFiniteCoordinate, "row " + std::to_string(row));
        cloud.points.push_back(p);
    }
    if (with_labels.value_or(false)) cloud.gt_labels = std::move(labels);
    cloud.validate();
    return cloud;
}

inline PointCloud read_frame(const std::filesystem::path& path) {
    if (detail::has_csv_extension(path)) return read_csv_frame(path);
    return decode_frame(detail::read_file_bytes(path));
}

inline void write_frame(const PointCloud& cloud, const std::filesystem::path& path) {
    detail::write_file_bytes(path, encode_frame(cloud));
}

struct CroppedCloud {
    PointCloud cloud;
    std::vector<std::size_t> index_map;  // kept index -> original index
};

/// Keeps points with |x| <= half_extent and |y| <= half_extent (closed box).
inline CroppedCloud crop_to_eval_region(const PointCloud& cloud, double half_extent) {
    if (!(half_extent > 0.0)) throw Error(ErrorCode::InvalidArgument, "half_extent must be positive");
    CroppedCloud out;
    out.cloud.frame_index = cloud.frame_index;
    if (cloud.gt_labels) out.cloud.gt_labels.emplace();
    if (cloud.gt_flow) out.cloud.gt_flow.emplace();
    for (std::size_t i = 0; i < cloud.points.size(); ++i) {
        const Vec3& p = cloud.points[i];
        if (std::abs(p.x()) > half_extent || std::abs(p.y()) > half_extent) continue;
        out.index_map.push_back(i);
        out.cloud.points.push_back(p);
        if (cloud.gt_labels) out.cloud.gt_labels->push_back((*cloud.gt_labels)[i]);
        if (cloud.gt_flow) out.cloud.gt_flow->push_back((*cloud.gt_flow)[i]);
    }
    return out;
}

}  // namespace sflow
