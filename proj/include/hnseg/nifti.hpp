#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hnseg/volume.hpp"

namespace hnseg {

class NiftiError : public std::runtime_error {
  public:
    enum class Code {
        BadMagic,
        BadHeaderSize,
        UnsupportedDatatype,
        UnsupportedDimension,
        TruncatedData,
        MultiChannelUnsupported,
        BadGzip,
        IoFailure,
    };
    NiftiError(Code c, const std::string& msg) : std::runtime_error(msg), code(c) {}
    Code code;
};

// NIfTI-1 datatype codes supported by this reader
enum : int16_t {
    kNiftiUint8 = 2,
    kNiftiInt16 = 4,
    kNiftiInt32 = 8,
    kNiftiFloat32 = 16,
    kNiftiFloat64 = 64,
};

struct NiftiHeader {
    int32_t sizeof_hdr = 348;
    std::array<int16_t, 8> dim{};
    int16_t datatype = kNiftiFloat32;
    int16_t bitpix = 32;
    std::array<float, 8> pixdim{};
    float vox_offset = 352.0f;
    float scl_slope = 1.0f;
    float scl_inter = 0.0f;
    int16_t qform_code = 0;
    int16_t sform_code = 0;
    float quatern_b = 0, quatern_c = 0, quatern_d = 0;
    float qoffset_x = 0, qoffset_y = 0, qoffset_z = 0;
    std::array<float, 4> srow_x{}, srow_y{}, srow_z{};
    std::array<char, 4> magic{'n', '+', '1', '\0'};
};

// sform wins over qform, qform over the pixdim diagonal
Affine decode_affine(const NiftiHeader& h);

// Decodes a NIfTI-1 single-file stream (plain or gzip). Values are promoted to
// float32 with scl_slope/scl_inter applied when slope != 0.
std::pair<NiftiHeader, Volume> read_nifti(std::span<const uint8_t> bytes);

// Single-channel volume to a float32 single-file stream; slope 1, inter 0,
// sform from the volume's affine. Optional template donates the q-fields.
std::vector<uint8_t> write_nifti(const Volume& v, const NiftiHeader* header_template = nullptr);

std::vector<uint8_t> gzip_compress(std::span<const uint8_t> raw);
std::vector<uint8_t> gzip_decompress(std::span<const uint8_t> gz);
inline bool looks_gzipped(std::span<const uint8_t> b) {
    return b.size() >= 2 && b[0] == 0x1F && b[1] == 0x8B;
}

// File helpers; .gz suffix selects the gzip container on write,
// gzip magic selects it on read.
std::pair<NiftiHeader, Volume> read_nifti_file(const std::string& path);
void write_nifti_file(const std::string& path, const Volume& v,
                      const NiftiHeader* header_template = nullptr);

}  // namespace hnseg
