#pragma once

#include <map>
#include <string>
#include <vector>

#include "hnseg/augment.hpp"
#include "hnseg/volume.hpp"

namespace hnseg {

class PipelineError : public std::runtime_error {
  public:
    enum class Code {
        MissingFile,
        BboxWithoutFiles,
        SingleCenter,
        NonFiniteLoss,
        UnpairedPatient,
        IoFailure,
    };
    PipelineError(Code c, const std::string& msg) : std::runtime_error(msg), code(c) {}
    Code code;
};

struct DatasetManifest {
    std::string root;
    bool preprocessed = false;  // true once volumes are cropped/1 mm/CT-normalized
    std::vector<PatientCase> cases;

    std::map<std::string, int64_t> center_counts() const;
    const PatientCase* find(const std::string& patient_id) const;
};

// leading alphabetic prefix by default; a regex override takes its
// first capture group (or the whole match) as the center id
std::string center_of(const std::string& patient_id, const std::string& center_regex = "");

// Expects <patient>_ct, _pt and optionally _gtvt NIfTI files under root.
DatasetManifest build_manifest(const std::string& root, const std::string& bbox_csv_path,
                               const std::string& center_regex = "");

// columns: patient_id,center_id,ct_path,pet_path,mask_path,x1,y1,z1,x2,y2,z2
void write_manifest_csv(const DatasetManifest& m, const std::string& path);
DatasetManifest read_manifest_csv(const std::string& path);

struct FoldSpec {
    std::string fold_id;  // the held-out center
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
};

// one fold per center, sorted center order
std::vector<FoldSpec> split_leave_one_center_out(const DatasetManifest& m);

struct PreprocessStats {
    int64_t processed = 0;
    int64_t skipped = 0;  // content hash unchanged
};

// Crop to the bbox at 1 mm, normalize CT, keep PET raw (z-score happens after
// augmentation), write per-case NIfTI pairs + manifest.csv into out_dir.
// Idempotent: a per-case content hash of the inputs skips up-to-date outputs.
PreprocessStats preprocess_dataset(const DatasetManifest& m, const std::string& out_dir);

// Loads a case from a preprocessed manifest into memory.
SampleCase load_sample(const DatasetManifest& m, const std::string& patient_id);

// z-score the PET channel, stack with CT; mask untouched
Volume assemble_input(const SampleCase& s);

}  // namespace hnseg
