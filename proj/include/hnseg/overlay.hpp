#pragma once

#include <string>
#include <vector>

#include "hnseg/volume.hpp"

namespace hnseg {

// Axial mid-slice plus +-offset slices as binary PGM. The base image maps to
// gray 0..150, the ground-truth contour draws at 200, the prediction contour
// at 255. Files are named <patient>_z<index>.pgm. Returns paths written.
std::vector<std::string> write_overlay_slices(const Volume& image, const Volume& pred_mask,
                                              const Volume* gt_mask,
                                              const std::string& patient_id,
                                              const std::string& out_dir,
                                              int64_t slice_offset = 10);

}  // namespace hnseg
