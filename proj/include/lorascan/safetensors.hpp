#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "lorascan/error.hpp"
#include "lorascan/tensor.hpp"

namespace lorascan {

// Safetensors container: 8-byte little-endian header length N, then N bytes
// of UTF-8 JSON mapping tensor names to {dtype, shape, data_offsets}, then a
// flat data region. data_offsets are relative to the end of the header.
struct SafetensorsFile {
    std::map<std::string, TensorRecord> tensors;
    std::optional<std::map<std::string, std::string>> metadata;
};

namespace detail {

inline uint64_t checked_num_elements(const std::vector<uint64_t>& shape) {
    uint64_t n = 1;
    for (uint64_t s : shape) {
        if (s != 0 && n > UINT64_MAX / s)
            throw Error(ErrorKind::MalformedHeader, "shape element product overflows");
        n *= s;
    }
    return n;
}

}  // namespace detail

inline SafetensorsFile parse_safetensors(std::span<const uint8_t> bytes) {
    if (bytes.size() < 8)
        throw Error(ErrorKind::TruncatedFile,
                    "file has " + std::to_string(bytes.size()) +
                        " bytes, need at least 8 for the header length",
                    std::nullopt, bytes.size());
    const uint64_t header_len = read_le64(bytes.data());
    if (header_len > bytes.size() - 8)
        throw Error(ErrorKind::TruncatedFile,
                    "header claims " + std::to_string(header_len) + " bytes, only " +
                        std::to_string(bytes.size() - 8) + " remain",
                    std::nullopt, 8);

    nlohmann::ordered_json header;
    try {
        header = nlohmann::ordered_json::parse(bytes.begin() + 8,
                                               bytes.begin() + 8 + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedHeader, e.what(), std::nullopt, 8);
    }
    if (!header.is_object())
        throw Error(ErrorKind::MalformedHeader, "header root is not a JSON object",
                    std::nullopt, 8);

    const uint64_t data_begin = 8 + header_len;
    const uint64_t data_len = bytes.size() - data_begin;

    SafetensorsFile out;
    uint64_t prev_end = 0;
    bool first = true;
    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            if (!entry.is_object())
                throw Error(ErrorKind::MalformedHeader, "__metadata__ is not an object");
            std::map<std::string, std::string> meta;
            for (const auto& [k, v] : entry.items()) {
                if (!v.is_string())
                    throw Error(ErrorKind::MalformedHeader,
                                "__metadata__ value for \"" + k + "\" is not a string");
                meta[k] = v.get<std::string>();
            }
            out.metadata = std::move(meta);
            continue;
        }
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets"))
            throw Error(ErrorKind::MalformedHeader,
                        "tensor \"" + name + "\" is missing dtype/shape/data_offsets");
        if (!entry["dtype"].is_string())
            throw Error(ErrorKind::MalformedHeader,
                        "tensor \"" + name + "\" has a non-string dtype");
        const auto dtype = dtype_from_name(entry["dtype"].get<std::string>());
        if (!dtype)
            throw Error(ErrorKind::UnsupportedDtype,
                        "tensor \"" + name + "\" has dtype " +
                            entry["dtype"].get<std::string>());

        TensorRecord rec;
        rec.name = name;
        rec.dtype = *dtype;
        if (!entry["shape"].is_array())
            throw Error(ErrorKind::MalformedHeader,
                        "tensor \"" + name + "\" has a non-array shape");
        for (const auto& s : entry["shape"]) {
            if (!s.is_number_unsigned())
                throw Error(ErrorKind::MalformedHeader,
                            "tensor \"" + name + "\" has a negative or non-integer dim");
            rec.shape.push_back(s.get<uint64_t>());
        }
        const auto& offs = entry["data_offsets"];
        if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() ||
            !offs[1].is_number_unsigned())
            throw Error(ErrorKind::MalformedHeader,
                        "tensor \"" + name + "\" has malformed data_offsets");
        const uint64_t begin = offs[0].get<uint64_t>();
        const uint64_t end = offs[1].get<uint64_t>();

        if (begin > end)
            throw Error(ErrorKind::OffsetMismatch,
                        "tensor \"" + name + "\" has begin > end", std::nullopt,
                        data_begin + begin);
        const uint64_t n = detail::checked_num_elements(rec.shape);
        const uint64_t expect = n * dtype_size(rec.dtype);
        if (end - begin != expect)
            throw Error(ErrorKind::OffsetMismatch,
                        "tensor \"" + name + "\" spans " + std::to_string(end - begin) +
                            " bytes, shape and dtype require " + std::to_string(expect),
                        std::nullopt, data_begin + begin);
        if (!first && begin < prev_end)
            throw Error(ErrorKind::OffsetMismatch,
                        "tensor \"" + name + "\" overlaps or precedes the previous entry",
                        std::nullopt, data_begin + begin);
        if (end > data_len)
            throw Error(ErrorKind::TruncatedFile,
                        "tensor \"" + name + "\" extends past the end of the data region",
                        std::nullopt, data_begin + end);
        prev_end = end;
        first = false;

        rec.values.resize(n);
        const uint8_t* src = bytes.data() + data_begin + begin;
        const size_t step = dtype_size(rec.dtype);
        for (uint64_t i = 0; i < n; ++i) rec.values[i] = decode_scalar(rec.dtype, src + i * step);

        out.tensors.emplace(name, std::move(rec));
    }
    return out;
}

inline SafetensorsFile parse_safetensors(const std::vector<uint8_t>& bytes) {
    return parse_safetensors(std::span<const uint8_t>(bytes.data(), bytes.size()));
}

// Emits records in list order with contiguous, gapless data offsets. The
// same input always yields the same bytes.
inline std::vector<uint8_t> emit_safetensors(
    const std::vector<TensorRecord>& records, Dtype dtype_out,
    const std::optional<std::map<std::string, std::string>>& metadata = std::nullopt) {
    std::unordered_set<std::string> seen;
    for (const auto& r : records) {
        if (!seen.insert(r.name).second)
            throw Error(ErrorKind::DuplicateName, "tensor \"" + r.name + "\" emitted twice");
        if (r.values.size() != r.num_elements())
            throw Error(ErrorKind::InvalidArgument,
                        "tensor \"" + r.name + "\" has " + std::to_string(r.values.size()) +
                            " values but its shape implies " +
                            std::to_string(r.num_elements()));
    }

    nlohmann::ordered_json header = nlohmann::ordered_json::object();
    if (metadata) {
        nlohmann::ordered_json meta = nlohmann::ordered_json::object();
        for (const auto& [k, v] : *metadata) meta[k] = v;
        header["__metadata__"] = std::move(meta);
    }

    const size_t step = dtype_size(dtype_out);
    uint64_t offset = 0;
    for (const auto& r : records) {
        const uint64_t nbytes = r.num_elements() * step;
        header[r.name] = {{"dtype", dtype_name(dtype_out)},
                          {"shape", r.shape},
                          {"data_offsets", {offset, offset + nbytes}}};
        offset += nbytes;
    }

    const std::string header_str = header.dump();
    std::vector<uint8_t> out(8 + header_str.size() + offset);
    write_le64(out.data(), header_str.size());
    std::memcpy(out.data() + 8, header_str.data(), header_str.size());

    uint8_t* data = out.data() + 8 + header_str.size();
    for (const auto& r : records) {
        for (double v : r.values) {
            encode_scalar(dtype_out, v, data);
            data += step;
        }
    }
    return out;
}

inline std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::IoError, "cannot open for reading", path.string());
    in.seekg(0, std::ios::end);
    const auto size = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<uint8_t> bytes(static_cast<size_t>(size));
    if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!in) throw Error(ErrorKind::IoError, "read failed", path.string());
    return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path,
                             std::span<const uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::IoError, "cannot open for writing", path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::IoError, "write failed", path.string());
}

inline SafetensorsFile load_safetensors_file(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return parse_safetensors(bytes);
    } catch (const Error& e) {
        rethrow_with_path(e, path.string());
    }
}

inline void save_safetensors_file(
    const std::filesystem::path& path, const std::vector<TensorRecord>& records,
    Dtype dtype_out,
    const std::optional<std::map<std::string, std::string>>& metadata = std::nullopt) {
    write_file_bytes(path, emit_safetensors(records, dtype_out, metadata));
}

}  // namespace lorascan
