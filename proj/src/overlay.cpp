#include "hnseg/overlay.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

namespace fs = std::filesystem;

namespace hnseg {

namespace {

constexpr uint8_t kBaseMax = 150;
constexpr uint8_t kGtGray = 200;
constexpr uint8_t kPredGray = 255;

// boundary voxel: set voxel with a cleared 4-neighbor in-slice, or on the edge
bool is_contour(const Volume& mask, int64_t i, int64_t j, int64_t k) {
    if (mask.at(0, i, j, k) <= 0.5f) return false;
    if (i == 0 || j == 0 || i == mask.nx - 1 || j == mask.ny - 1) return true;
    return mask.at(0, i - 1, j, k) <= 0.5f || mask.at(0, i + 1, j, k) <= 0.5f ||
           mask.at(0, i, j - 1, k) <= 0.5f || mask.at(0, i, j + 1, k) <= 0.5f;
}

}  // namespace

std::vector<std::string> write_overlay_slices(const Volume& image, const Volume& pred_mask,
                                              const Volume* gt_mask,
                                              const std::string& patient_id,
                                              const std::string& out_dir,
                                              int64_t slice_offset) {
    if (image.nx != pred_mask.nx || image.ny != pred_mask.ny || image.nz != pred_mask.nz ||
        (gt_mask && (gt_mask->nx != image.nx || gt_mask->ny != image.ny ||
                     gt_mask->nz != image.nz))) {
        throw GeometryError(GeometryError::Code::GridMismatch,
                            "overlay volumes are not on one grid");
    }
    fs::create_directories(out_dir);

    const int64_t mid = image.nz / 2;
    std::set<int64_t> slices{std::max<int64_t>(0, mid - slice_offset), mid,
                             std::min(image.nz - 1, mid + slice_offset)};

    const float lo = image.channel_min(0);
    const float hi = image.channel_max(0);
    const float span = hi > lo ? hi - lo : 1.0f;

    std::vector<std::string> written;
    for (int64_t k : slices) {
        std::vector<uint8_t> pix(size_t(image.nx * image.ny));
        for (int64_t j = 0; j < image.ny; ++j) {
            for (int64_t i = 0; i < image.nx; ++i) {
                float g = (image.at(0, i, j, k) - lo) / span;
                uint8_t v = uint8_t(g * float(kBaseMax) + 0.5f);
                if (gt_mask && is_contour(*gt_mask, i, j, k)) v = kGtGray;
                if (is_contour(pred_mask, i, j, k)) v = kPredGray;
                pix[size_t(j * image.nx + i)] = v;
            }
        }
        std::string path =
            (fs::path(out_dir) / (patient_id + "_z" + std::to_string(k) + ".pgm")).string();
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << "P5\n" << image.nx << " " << image.ny << "\n255\n";
        out.write(reinterpret_cast<const char*>(pix.data()), std::streamsize(pix.size()));
        written.push_back(path);
    }
    return written;
}

}  // namespace hnseg
