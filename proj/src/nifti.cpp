#include "hnseg/nifti.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace hnseg {

namespace {

// byte offsets of the NIfTI-1 header fields this reader cares about
constexpr size_t kOffDim = 40;
constexpr size_t kOffDatatype = 70;
constexpr size_t kOffBitpix = 72;
constexpr size_t kOffPixdim = 76;
constexpr size_t kOffVoxOffset = 108;
constexpr size_t kOffSclSlope = 112;
constexpr size_t kOffSclInter = 116;
constexpr size_t kOffQformCode = 252;
constexpr size_t kOffSformCode = 254;
constexpr size_t kOffQuaternB = 256;
constexpr size_t kOffSrowX = 280;
constexpr size_t kOffMagic = 344;
constexpr size_t kHeaderSize = 348;

template <typename T>
T load_le(const uint8_t* p, bool swap) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    if (swap) {
        auto b = std::bit_cast<std::array<uint8_t, sizeof(T)>>(v);
        std::reverse(b.begin(), b.end());
        v = std::bit_cast<T>(b);
    }
    return v;
}

template <typename T>
void store_le(uint8_t* p, T v) {
    std::memcpy(p, &v, sizeof(T));
}

int expected_bitpix(int16_t datatype) {
    switch (datatype) {
        case kNiftiUint8: return 8;
        case kNiftiInt16: return 16;
        case kNiftiInt32: return 32;
        case kNiftiFloat32: return 32;
        case kNiftiFloat64: return 64;
        default: return 0;
    }
}

NiftiHeader parse_header(std::span<const uint8_t> b, bool& swap) {
    if (b.size() < kHeaderSize) {
        throw NiftiError(NiftiError::Code::BadHeaderSize, "stream shorter than a NIfTI-1 header");
    }
    int32_t hdr_size = load_le<int32_t>(b.data(), false);
    if (hdr_size == 348) {
        swap = false;
    } else if (load_le<int32_t>(b.data(), true) == 348) {
        swap = true;
    } else if (hdr_size == 540 || load_le<int32_t>(b.data(), true) == 540) {
        throw NiftiError(NiftiError::Code::BadHeaderSize, "NIfTI-2 streams are not supported");
    } else {
        throw NiftiError(NiftiError::Code::BadHeaderSize,
                         "sizeof_hdr is not 348 in either byte order");
    }

    NiftiHeader h;
    h.sizeof_hdr = 348;
    for (int i = 0; i < 8; ++i) {
        h.dim[i] = load_le<int16_t>(b.data() + kOffDim + 2 * i, swap);
        h.pixdim[i] = load_le<float>(b.data() + kOffPixdim + 4 * i, swap);
    }
    h.datatype = load_le<int16_t>(b.data() + kOffDatatype, swap);
    h.bitpix = load_le<int16_t>(b.data() + kOffBitpix, swap);
    h.vox_offset = load_le<float>(b.data() + kOffVoxOffset, swap);
    h.scl_slope = load_le<float>(b.data() + kOffSclSlope, swap);
    h.scl_inter = load_le<float>(b.data() + kOffSclInter, swap);
    h.qform_code = load_le<int16_t>(b.data() + kOffQformCode, swap);
    h.sform_code = load_le<int16_t>(b.data() + kOffSformCode, swap);
    h.quatern_b = load_le<float>(b.data() + kOffQuaternB + 0, swap);
    h.quatern_c = load_le<float>(b.data() + kOffQuaternB + 4, swap);
    h.quatern_d = load_le<float>(b.data() + kOffQuaternB + 8, swap);
    h.qoffset_x = load_le<float>(b.data() + kOffQuaternB + 12, swap);
    h.qoffset_y = load_le<float>(b.data() + kOffQuaternB + 16, swap);
    h.qoffset_z = load_le<float>(b.data() + kOffQuaternB + 20, swap);
    for (int i = 0; i < 4; ++i) {
        h.srow_x[i] = load_le<float>(b.data() + kOffSrowX + 4 * i, swap);
        h.srow_y[i] = load_le<float>(b.data() + kOffSrowX + 16 + 4 * i, swap);
        h.srow_z[i] = load_le<float>(b.data() + kOffSrowX + 32 + 4 * i, swap);
    }
    std::memcpy(h.magic.data(), b.data() + kOffMagic, 4);

    if (std::memcmp(h.magic.data(), "ni1", 4) == 0) {
        throw NiftiError(NiftiError::Code::BadMagic,
                         "two-file NIfTI-1 (.hdr/.img) is not supported");
    }
    if (std::memcmp(h.magic.data(), "n+1", 4) != 0) {
        throw NiftiError(NiftiError::Code::BadMagic, "magic is not 'n+1'");
    }
    if (h.dim[0] < 1 || h.dim[0] > 7) {
        throw NiftiError(NiftiError::Code::BadHeaderSize,
                         "dim[0] = " + std::to_string(h.dim[0]) + " outside 1..7");
    }
    return h;
}

}  // namespace

Affine decode_affine(const NiftiHeader& h) {
    Affine a;
    if (h.sform_code > 0) {
        for (int i = 0; i < 4; ++i) {
            a.m[i] = h.srow_x[i];
            a.m[4 + i] = h.srow_y[i];
            a.m[8 + i] = h.srow_z[i];
        }
    } else if (h.qform_code > 0) {
        double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
        double a2 = 1.0 - (b * b + c * c + d * d);
        double qa = a2 > 0.0 ? std::sqrt(a2) : 0.0;
        double qfac = h.pixdim[0] < 0.0f ? -1.0 : 1.0;
        double sx = h.pixdim[1] > 0 ? h.pixdim[1] : 1.0;
        double sy = h.pixdim[2] > 0 ? h.pixdim[2] : 1.0;
        double sz = (h.pixdim[3] > 0 ? h.pixdim[3] : 1.0) * qfac;
        a.m = {(qa * qa + b * b - c * c - d * d) * sx, 2 * (b * c - qa * d) * sy,
               2 * (b * d + qa * c) * sz,              h.qoffset_x,
               2 * (b * c + qa * d) * sx,              (qa * qa + c * c - b * b - d * d) * sy,
               2 * (c * d - qa * b) * sz,              h.qoffset_y,
               2 * (b * d - qa * c) * sx,              2 * (c * d + qa * b) * sy,
               (qa * qa + d * d - c * c - b * b) * sz, h.qoffset_z};
    } else {
        a = Affine::diagonal(h.pixdim[1] > 0 ? h.pixdim[1] : 1.0,
                             h.pixdim[2] > 0 ? h.pixdim[2] : 1.0,
                             h.pixdim[3] > 0 ? h.pixdim[3] : 1.0);
    }
    if (std::abs(a.det3()) < 1e-12) {
        throw GeometryError(GeometryError::Code::DegenerateAffine,
                            "decoded affine 3x3 block is singular");
    }
    return a;
}

std::pair<NiftiHeader, Volume> read_nifti(std::span<const uint8_t> bytes) {
    std::vector<uint8_t> inflated;
    if (looks_gzipped(bytes)) {
        inflated = gzip_decompress(bytes);
        bytes = inflated;
    }

    bool swap = false;
    NiftiHeader h = parse_header(bytes, swap);

    int bp = expected_bitpix(h.datatype);
    if (bp == 0) {
        throw NiftiError(NiftiError::Code::UnsupportedDatatype,
                         "datatype code " + std::to_string(h.datatype) + " not supported");
    }
    if (h.bitpix != bp) {
        throw NiftiError(NiftiError::Code::UnsupportedDatatype,
                         "bitpix " + std::to_string(h.bitpix) + " inconsistent with datatype " +
                             std::to_string(h.datatype));
    }

    int64_t nx = h.dim[0] >= 1 ? std::max<int64_t>(h.dim[1], 1) : 1;
    int64_t ny = h.dim[0] >= 2 ? std::max<int64_t>(h.dim[2], 1) : 1;
    int64_t nz = h.dim[0] >= 3 ? std::max<int64_t>(h.dim[3], 1) : 1;
    for (int d = 4; d <= h.dim[0]; ++d) {
        if (h.dim[d] > 1) {
            throw NiftiError(NiftiError::Code::UnsupportedDimension,
                             "only 3D volumes are supported (dim[" + std::to_string(d) +
                                 "] = " + std::to_string(h.dim[d]) + ")");
        }
    }

    int64_t voxel_count = nx * ny * nz;
    int64_t offset = int64_t(std::llround(h.vox_offset));
    if (offset < 352) {  // header + extension flag
        throw NiftiError(NiftiError::Code::BadHeaderSize,
                         "vox_offset below 352 in a single-file stream");
    }
    size_t need = size_t(offset) + size_t(voxel_count) * size_t(bp / 8);
    if (bytes.size() < need) {
        throw NiftiError(NiftiError::Code::TruncatedData,
                         "stream has " + std::to_string(bytes.size()) + " bytes, needs " +
                             std::to_string(need));
    }

    Volume vol(1, nx, ny, nz);
    vol.spacing = {h.pixdim[1] > 0 ? h.pixdim[1] : 1.0, h.pixdim[2] > 0 ? h.pixdim[2] : 1.0,
                   h.pixdim[3] > 0 ? h.pixdim[3] : 1.0};
    vol.affine = decode_affine(h);

    const uint8_t* src = bytes.data() + offset;
    const bool scaled = h.scl_slope != 0.0f;
    const double slope = h.scl_slope, inter = h.scl_inter;
    auto decode = [&](auto tag) {
        using T = decltype(tag);
        // NIfTI raw order is x fastest; internal layout is z fastest
        for (int64_t k = 0; k < nz; ++k) {
            for (int64_t j = 0; j < ny; ++j) {
                const uint8_t* row = src + sizeof(T) * size_t((k * ny + j) * nx);
                for (int64_t i = 0; i < nx; ++i) {
                    T raw = load_le<T>(row + sizeof(T) * size_t(i), swap);
                    double val = double(raw);
                    vol.at(0, i, j, k) = float(scaled ? val * slope + inter : val);
                }
            }
        }
    };
    switch (h.datatype) {
        case kNiftiUint8: decode(uint8_t{}); break;
        case kNiftiInt16: decode(int16_t{}); break;
        case kNiftiInt32: decode(int32_t{}); break;
        case kNiftiFloat32: decode(float{}); break;
        case kNiftiFloat64: decode(double{}); break;
    }
    return {h, vol};
}

std::vector<uint8_t> write_nifti(const Volume& v, const NiftiHeader* header_template) {
    if (v.channels != 1) {
        throw NiftiError(NiftiError::Code::MultiChannelUnsupported,
                         "write_nifti takes single-channel volumes; split channels first");
    }
    if (v.nx > 32767 || v.ny > 32767 || v.nz > 32767) {
        throw NiftiError(NiftiError::Code::UnsupportedDimension,
                         "volume dims exceed the int16 fields of the format");
    }
    for (float x : v.data) {
        if (!std::isfinite(x)) {
            throw NiftiError(NiftiError::Code::UnsupportedDatatype,
                             "refusing to write non-finite voxel values");
        }
    }

    const size_t data_offset = 352;  // header + 4-byte extension flag
    std::vector<uint8_t> out(data_offset + size_t(v.size()) * 4, 0);
    uint8_t* p = out.data();

    store_le<int32_t>(p, 348);
    std::array<int16_t, 8> dim{3, int16_t(v.nx), int16_t(v.ny), int16_t(v.nz), 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) store_le<int16_t>(p + kOffDim + 2 * i, dim[i]);
    store_le<int16_t>(p + kOffDatatype, kNiftiFloat32);
    store_le<int16_t>(p + kOffBitpix, 32);
    std::array<float, 8> pixdim{1.0f, float(v.spacing[0]), float(v.spacing[1]),
                                float(v.spacing[2]), 0, 0, 0, 0};
    if (header_template) pixdim[0] = header_template->pixdim[0];
    for (int i = 0; i < 8; ++i) store_le<float>(p + kOffPixdim + 4 * i, pixdim[i]);
    store_le<float>(p + kOffVoxOffset, float(data_offset));
    store_le<float>(p + kOffSclSlope, 1.0f);
    store_le<float>(p + kOffSclInter, 0.0f);
    if (header_template) {
        store_le<int16_t>(p + kOffQformCode, header_template->qform_code);
        store_le<float>(p + kOffQuaternB + 0, header_template->quatern_b);
        store_le<float>(p + kOffQuaternB + 4, header_template->quatern_c);
        store_le<float>(p + kOffQuaternB + 8, header_template->quatern_d);
        store_le<float>(p + kOffQuaternB + 12, header_template->qoffset_x);
        store_le<float>(p + kOffQuaternB + 16, header_template->qoffset_y);
        store_le<float>(p + kOffQuaternB + 20, header_template->qoffset_z);
    }
    store_le<int16_t>(p + kOffSformCode, 1);
    for (int i = 0; i < 4; ++i) {
        store_le<float>(p + kOffSrowX + 4 * i, float(v.affine.m[i]));
        store_le<float>(p + kOffSrowX + 16 + 4 * i, float(v.affine.m[4 + i]));
        store_le<float>(p + kOffSrowX + 32 + 4 * i, float(v.affine.m[8 + i]));
    }
    std::memcpy(p + kOffMagic, "n+1\0", 4);

    uint8_t* dst = p + data_offset;
    for (int64_t k = 0; k < v.nz; ++k) {
        for (int64_t j = 0; j < v.ny; ++j) {
            for (int64_t i = 0; i < v.nx; ++i) {
                store_le<float>(dst + 4 * size_t((k * v.ny + j) * v.nx + i), v.at(0, i, j, k));
            }
        }
    }
    return out;
}

std::vector<uint8_t> gzip_compress(std::span<const uint8_t> raw) {
    z_stream zs{};
    if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8,
                     Z_DEFAULT_STRATEGY) != Z_OK) {
        throw NiftiError(NiftiError::Code::BadGzip, "deflateInit2 failed");
    }
    std::vector<uint8_t> out(deflateBound(&zs, uLong(raw.size())) + 32);
    zs.next_in = const_cast<Bytef*>(raw.data());
    zs.avail_in = uInt(raw.size());
    zs.next_out = out.data();
    zs.avail_out = uInt(out.size());
    int rc = deflate(&zs, Z_FINISH);
    deflateEnd(&zs);
    if (rc != Z_STREAM_END) {
        throw NiftiError(NiftiError::Code::BadGzip, "deflate did not finish");
    }
    out.resize(zs.total_out);
    return out;
}

std::vector<uint8_t> gzip_decompress(std::span<const uint8_t> gz) {
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 16) != Z_OK) {
        throw NiftiError(NiftiError::Code::BadGzip, "inflateInit2 failed");
    }
    std::vector<uint8_t> out;
    out.reserve(gz.size() * 4);
    std::vector<uint8_t> buf(1 << 16);
    zs.next_in = const_cast<Bytef*>(gz.data());
    zs.avail_in = uInt(gz.size());
    int rc = Z_OK;
    do {
        zs.next_out = buf.data();
        zs.avail_out = uInt(buf.size());
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw NiftiError(NiftiError::Code::BadGzip,
                             "corrupt gzip stream (zlib rc " + std::to_string(rc) + ")");
        }
        out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
    } while (rc != Z_STREAM_END);
    inflateEnd(&zs);
    return out;
}

std::pair<NiftiHeader, Volume> read_nifti_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NiftiError(NiftiError::Code::IoFailure, "cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return read_nifti(bytes);
}

void write_nifti_file(const std::string& path, const Volume& v,
                      const NiftiHeader* header_template) {
    std::vector<uint8_t> bytes = write_nifti(v, header_template);
    if (path.size() > 3 && path.substr(path.size() - 3) == ".gz") {
        bytes = gzip_compress(bytes);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw NiftiError(NiftiError::Code::IoFailure, "cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw NiftiError(NiftiError::Code::IoFailure, "short write to " + path);
}

}  // namespace hnseg
