/*
 * renalseg: cascaded 3D U-Net segmentation of 4D DCE volumes
 *
 * Copyright 2026 The renalseg Authors
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

#include "renalseg/rv4d.hpp"

#include <stdexcept>

#include "renalseg/io.hpp"

namespace renalseg::rv4d {

namespace {

void write_header(io::ByteWriter& w, const Shape& dims, DType dtype, const VoxelSpacing& sp,
                  const std::vector<double>& times) {
  w.text("RV4D");
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(dims.size()));
  for (std::size_t d : dims) w.u32(static_cast<std::uint32_t>(d));
  w.u8(static_cast<std::uint8_t>(dtype));
  w.f32(static_cast<float>(sp.x));
  w.f32(static_cast<float>(sp.y));
  w.f32(static_cast<float>(sp.z));
  w.u32(static_cast<std::uint32_t>(times.size()));
  for (double t : times) w.f32(static_cast<float>(t));
}

}  // namespace

std::vector<std::uint8_t> encode(const Volume4D& vol) {
  vol.validate();
  io::ByteWriter w;
  write_header(w, vol.data.dims(), DType::Float32, vol.spacing, vol.time_points_sec);
  for (float v : vol.data.storage()) w.f32(v);
  w.seal();
  return std::move(w.buffer());
}

std::vector<std::uint8_t> encode(const LabelMap& labels, const VoxelSpacing& spacing) {
  if (labels.rank() != 3) throw std::invalid_argument("rv4d: label maps must be [D,H,W], got " + shape_string(labels.dims()));
  io::ByteWriter w;
  write_header(w, labels.dims(), DType::Label8, spacing, {});
  w.bytes(labels.storage());
  w.seal();
  return std::move(w.buffer());
}

Contents decode(std::span<const std::uint8_t> bytes, const std::string& origin) {
  io::ByteReader r(bytes, origin);
  if (bytes.size() < 8) r.fail("truncated file (" + std::to_string(bytes.size()) + " bytes)");
  if (r.text(4) != "RV4D") {
    io::ByteReader at_start(bytes, origin);
    at_start.fail("bad magic, not an RV4D file");
  }
  r.verify_crc();
  const std::size_t body_end = bytes.size() - 4;

  Contents c;
  const std::uint32_t version = r.u32();
  if (version != kVersion) r.fail("unsupported RV4D version " + std::to_string(version));
  const std::uint32_t ndims = r.u32();
  if (ndims < 1 || ndims > 8) r.fail("implausible dimension count " + std::to_string(ndims));
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < ndims; ++i) {
    const std::uint32_t d = r.u32();
    if (d == 0) r.fail("zero-length axis " + std::to_string(i));
    c.dims.push_back(d);
    count *= d;
    if (count > (std::uint64_t{1} << 36)) r.fail("dims too large");
  }
  const std::uint8_t dtype = r.u8();
  if (dtype != 1 && dtype != 2) r.fail("unknown dtype code " + std::to_string(dtype));
  c.dtype = static_cast<DType>(dtype);
  c.spacing.x = r.f32();
  c.spacing.y = r.f32();
  c.spacing.z = r.f32();
  const std::uint32_t nt = r.u32();
  if (nt > body_end - r.offset()) r.fail("time point count " + std::to_string(nt) + " exceeds file size");
  for (std::uint32_t i = 0; i < nt; ++i) c.times.push_back(r.f32());

  const std::uint64_t payload = count * (c.dtype == DType::Float32 ? 4 : 1);
  if (payload != body_end - r.offset())
    r.fail("payload is " + std::to_string(body_end - r.offset()) + " bytes, dims " + shape_string(c.dims) + " need " +
           std::to_string(payload));
  if (c.dtype == DType::Float32) {
    c.real = Tensor(c.dims);
    for (auto& v : c.real.storage()) v = r.f32();
  } else {
    const auto raw = r.bytes(static_cast<std::size_t>(payload));
    c.labels = LabelMap(c.dims, std::vector<std::uint8_t>(raw.begin(), raw.end()));
  }
  return c;
}

void write_volume(const std::filesystem::path& path, const Volume4D& vol) { io::write_file_atomic(path, encode(vol)); }

void write_labels(const std::filesystem::path& path, const LabelMap& labels, const VoxelSpacing& spacing) {
  io::write_file_atomic(path, encode(labels, spacing));
}

Volume4D read_volume(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  Contents c = decode(bytes, path.string());
  if (c.dtype != DType::Float32) throw io::FormatError(path.string() + ": expected a real-valued volume, found labels", 0);
  Volume4D vol;
  vol.spacing = c.spacing;
  if (c.dims.size() == 3) {
    vol.data = c.real.reshaped({1, c.dims[0], c.dims[1], c.dims[2]});
    vol.time_points_sec = {c.times.empty() ? 0.0 : static_cast<double>(c.times[0])};
  } else if (c.dims.size() == 4) {
    vol.data = std::move(c.real);
    vol.time_points_sec.assign(c.times.begin(), c.times.end());
  } else {
    throw io::FormatError(path.string() + ": volume must have 3 or 4 dims, found " + shape_string(c.dims), 0);
  }
  try {
    vol.validate();
  } catch (const std::invalid_argument& e) {
    throw io::FormatError(path.string() + ": " + e.what(), 0);
  }
  return vol;
}

std::pair<LabelMap, VoxelSpacing> read_labels(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  Contents c = decode(bytes, path.string());
  if (c.dtype != DType::Label8) throw io::FormatError(path.string() + ": expected a label map, found real data", 0);
  if (c.dims.size() != 3)
    throw io::FormatError(path.string() + ": label map must have 3 dims, found " + shape_string(c.dims), 0);
  return {std::move(c.labels), c.spacing};
}

}  // namespace renalseg::rv4d
