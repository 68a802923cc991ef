#include "hnseg/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "hnseg/nifti.hpp"
#include "hnseg/rng.hpp"

namespace fs = std::filesystem;

namespace hnseg {

namespace {

std::string find_case_file(const std::string& root, const std::string& stem) {
    for (const char* ext : {".nii.gz", ".nii"}) {
        fs::path p = fs::path(root) / (stem + ext);
        if (fs::exists(p)) return p.string();
    }
    return "";
}

uint64_t fnv1a_file(const std::string& path, uint64_t h) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return h;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= uint64_t(uint8_t(buf[i]));
            h *= 0x100000001b3ull;
        }
    }
    return h;
}

std::string csv_field(const std::string& s) {
    return s;  // paths and ids never contain commas in this toolkit
}

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

std::map<std::string, int64_t> DatasetManifest::center_counts() const {
    std::map<std::string, int64_t> out;
    for (const auto& c : cases) out[c.center_id] += 1;
    return out;
}

const PatientCase* DatasetManifest::find(const std::string& patient_id) const {
    for (const auto& c : cases) {
        if (c.patient_id == patient_id) return &c;
    }
    return nullptr;
}

std::string center_of(const std::string& patient_id, const std::string& center_regex) {
    if (!center_regex.empty()) {
        std::regex re(center_regex);
        std::smatch m;
        if (std::regex_search(patient_id, m, re)) {
            return m.size() > 1 ? m[1].str() : m[0].str();
        }
        return "";
    }
    std::string out;
    for (char ch : patient_id) {
        if (!std::isalpha(static_cast<unsigned char>(ch))) break;
        out += ch;
    }
    return out;
}

DatasetManifest build_manifest(const std::string& root, const std::string& bbox_csv_path,
                               const std::string& center_regex) {
    std::ifstream in(bbox_csv_path);
    if (!in) {
        throw PipelineError(PipelineError::Code::IoFailure,
                            "cannot open bounding-box CSV " + bbox_csv_path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    auto boxes = parse_bbox_csv(ss.str());

    DatasetManifest m;
    m.root = root;
    std::vector<std::string> missing;
    for (const auto& b : boxes) {
        PatientCase c;
        c.patient_id = b.patient_id;
        c.center_id = center_of(b.patient_id, center_regex);
        if (c.center_id.empty()) {
            throw PipelineError(PipelineError::Code::MissingFile,
                                "cannot derive a center id from '" + b.patient_id + "'");
        }
        c.bbox = b;
        c.ct_path = find_case_file(root, b.patient_id + "_ct");
        c.pet_path = find_case_file(root, b.patient_id + "_pt");
        c.mask_path = find_case_file(root, b.patient_id + "_gtvt");
        if (c.ct_path.empty() && c.pet_path.empty() && c.mask_path.empty()) {
            throw PipelineError(PipelineError::Code::BboxWithoutFiles,
                                "bounding box for " + b.patient_id +
                                    " has no files under " + root);
        }
        if (c.ct_path.empty()) missing.push_back(b.patient_id + " (CT)");
        if (c.pet_path.empty()) missing.push_back(b.patient_id + " (PET)");
        m.cases.push_back(std::move(c));
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& s : missing) list += "\n  " + s;
        throw PipelineError(PipelineError::Code::MissingFile,
                            "missing scan files:" + list);
    }
    return m;
}

void write_manifest_csv(const DatasetManifest& m, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw PipelineError(PipelineError::Code::IoFailure, "cannot write " + path);
    }
    out << "patient_id,center_id,ct_path,pet_path,mask_path,x1,y1,z1,x2,y2,z2\n";
    char buf[64];
    for (const auto& c : m.cases) {
        out << csv_field(c.patient_id) << ',' << csv_field(c.center_id) << ','
            << csv_field(c.ct_path) << ',' << csv_field(c.pet_path) << ','
            << csv_field(c.mask_path);
        for (double v : {c.bbox.x1, c.bbox.y1, c.bbox.z1, c.bbox.x2, c.bbox.y2, c.bbox.z2}) {
            std::snprintf(buf, sizeof(buf), ",%.6f", v);
            out << buf;
        }
        out << "\n";
    }
}

DatasetManifest read_manifest_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw PipelineError(PipelineError::Code::IoFailure, "cannot open manifest " + path);
    }
    DatasetManifest m;
    m.root = fs::path(path).parent_path().string();
    m.preprocessed = fs::exists(fs::path(m.root) / ".preprocessed");
    std::string line;
    if (!std::getline(in, line)) {
        throw PipelineError(PipelineError::Code::IoFailure, "empty manifest " + path);
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_line(line);
        if (f.size() < 11) {
            throw PipelineError(PipelineError::Code::IoFailure,
                                "manifest row with fewer than 11 fields: " + line);
        }
        PatientCase c;
        c.patient_id = f[0];
        c.center_id = f[1];
        c.ct_path = f[2];
        c.pet_path = f[3];
        c.mask_path = f[4];
        c.bbox.patient_id = f[0];
        c.bbox.x1 = std::stod(f[5]);
        c.bbox.y1 = std::stod(f[6]);
        c.bbox.z1 = std::stod(f[7]);
        c.bbox.x2 = std::stod(f[8]);
        c.bbox.y2 = std::stod(f[9]);
        c.bbox.z2 = std::stod(f[10]);
        m.cases.push_back(std::move(c));
    }
    return m;
}

std::vector<FoldSpec> split_leave_one_center_out(const DatasetManifest& m) {
    auto counts = m.center_counts();
    if (counts.size() < 2) {
        throw PipelineError(PipelineError::Code::SingleCenter,
                            "leave-one-center-out needs at least 2 centers");
    }
    std::vector<FoldSpec> folds;
    for (const auto& [center, n] : counts) {
        FoldSpec f;
        f.fold_id = center;
        for (const auto& c : m.cases) {
            (c.center_id == center ? f.val_ids : f.train_ids).push_back(c.patient_id);
        }
        folds.push_back(std::move(f));
    }
    return folds;
}

PreprocessStats preprocess_dataset(const DatasetManifest& m, const std::string& out_dir) {
    fs::create_directories(out_dir);
    PreprocessStats stats;
    DatasetManifest out_manifest;
    out_manifest.root = out_dir;
    out_manifest.preprocessed = true;

    for (const auto& c : m.cases) {
        uint64_t h = 0xcbf29ce484222325ull;
        h = fnv1a_file(c.ct_path, h);
        h = fnv1a_file(c.pet_path, h);
        if (c.has_mask()) h = fnv1a_file(c.mask_path, h);
        for (double v : {c.bbox.x1, c.bbox.y1, c.bbox.z1, c.bbox.x2, c.bbox.y2, c.bbox.z2}) {
            h = rng_key(h, uint64_t(int64_t(v * 1000.0)));
        }
        char hash_hex[32];
        std::snprintf(hash_hex, sizeof(hash_hex), "%016llx", (unsigned long long)h);

        PatientCase oc = c;
        oc.ct_path = (fs::path(out_dir) / (c.patient_id + "_ct.nii.gz")).string();
        oc.pet_path = (fs::path(out_dir) / (c.patient_id + "_pt.nii.gz")).string();
        oc.mask_path =
            c.has_mask() ? (fs::path(out_dir) / (c.patient_id + "_gtvt.nii.gz")).string() : "";

        fs::path hash_path = fs::path(out_dir) / (c.patient_id + ".hash");
        bool up_to_date = false;
        if (fs::exists(hash_path) && fs::exists(oc.ct_path) && fs::exists(oc.pet_path) &&
            (!c.has_mask() || fs::exists(oc.mask_path))) {
            std::ifstream hin(hash_path);
            std::string prev;
            hin >> prev;
            up_to_date = prev == hash_hex;
        }
        if (up_to_date) {
            stats.skipped += 1;
        } else {
            auto [cth, ct] = read_nifti_file(c.ct_path);
            auto [peth, pet] = read_nifti_file(c.pet_path);
            Volume ct_c = normalize_ct(crop_resample(ct, c.bbox, Interp::Trilinear));
            Volume pet_c = crop_resample(pet, c.bbox, Interp::Trilinear);
            write_nifti_file(oc.ct_path, ct_c);
            write_nifti_file(oc.pet_path, pet_c);
            if (c.has_mask()) {
                auto [mh, mask] = read_nifti_file(c.mask_path);
                Volume mask_c = crop_resample(mask, c.bbox, Interp::Nearest);
                write_nifti_file(oc.mask_path, mask_c);
            }
            std::ofstream hout(hash_path, std::ios::trunc);
            hout << hash_hex << "\n";
            stats.processed += 1;
        }
        out_manifest.cases.push_back(std::move(oc));
    }
    std::ofstream flag((fs::path(out_dir) / ".preprocessed").string());
    flag << "1\n";
    write_manifest_csv(out_manifest, (fs::path(out_dir) / "manifest.csv").string());
    return stats;
}

SampleCase load_sample(const DatasetManifest& m, const std::string& patient_id) {
    const PatientCase* c = m.find(patient_id);
    if (!c) {
        throw PipelineError(PipelineError::Code::MissingFile,
                            "patient " + patient_id + " not in manifest");
    }
    SampleCase s;
    s.patient_id = c->patient_id;
    s.ct = read_nifti_file(c->ct_path).second;
    s.pet = read_nifti_file(c->pet_path).second;
    if (c->has_mask()) s.mask = read_nifti_file(c->mask_path).second;
    return s;
}

Volume assemble_input(const SampleCase& s) {
    return stack_modalities(s.ct, normalize_pet_zscore(s.pet));
}

}  // namespace hnseg
