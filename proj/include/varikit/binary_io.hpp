/*
 * Copyright (c) 2026, The varikit Authors.  All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Little-endian encoding helpers for the checkpoint and plugin file formats.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "varikit/errors.hpp"
#include "varikit/tensor.hpp"

namespace varikit {

inline std::vector<char> read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open '" + path.string() + "' for reading");
    }
    return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<char>& bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw std::runtime_error("short write to '" + path.string() + "'");
    }
}

class ByteWriter {
public:
    void magic(std::string_view m) { bytes_.insert(bytes_.end(), m.begin(), m.end()); }

    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i) {
            bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
        }
    }

    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

    template <class T>
    void tensor_f32(const Tensor<T>& t)
    {
        for (T v : t.data()) {
            f32(static_cast<float>(v));
        }
    }

    const std::vector<char>& bytes() const { return bytes_; }


private:
    std::vector<char> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

    void expect_magic(std::string_view m)
    {
        need(m.size(), "magic");
        if (std::string_view(bytes_.data() + pos_, m.size()) != m) {
            throw FormatError("bad magic, expected '" + std::string(m) + "'", pos_);
        }
        pos_ += m.size();
    }

    std::uint32_t u32(const char* what)
    {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }

    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

    template <class T>
    Tensor<T> tensor_f32(Shape shape, const char* what)
    {
        need(4 * shape.numel(), what);
        std::vector<T> data(shape.numel());
        for (auto& v : data) {
            v = static_cast<T>(f32(what));
        }
        return Tensor<T>(shape, std::move(data));
    }

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void expect_end()
    {
        if (pos_ != bytes_.size()) {
            throw FormatError(std::to_string(bytes_.size() - pos_) + " trailing bytes", pos_);
        }
    }

private:
    void need(std::size_t n, const char* what) const
    {
        if (bytes_.size() - pos_ < n) {
            throw FormatError(std::string("truncated while reading ") + what, pos_);
        }
    }

    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

/// FNV-1a over the raw bytes of a sequence of tensors.
class Checksum {
public:
    template <class T>
    void add(const Tensor<T>& t)
    {
        for (std::byte b : std::as_bytes(t.data())) {
            h_ ^= static_cast<std::uint64_t>(b);
            h_ *= 0x100000001B3ULL;
        }
    }
    std::uint64_t value() const { return h_; }

private:
    std::uint64_t h_ = 0xCBF29CE484222325ULL;
};

}  // namespace varikit
