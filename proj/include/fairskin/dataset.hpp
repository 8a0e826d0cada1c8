#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fairskin/model.hpp"
#include "fairskin/rng.hpp"

namespace fairskin {

// One dataset row. Sensitive attributes use -1 for "unknown"; fst is 1..6,
// age_group a small band index, gender 0 = M, 1 = F.
struct SampleRecord {
    std::string image_path;
    std::string mask_path;  // empty when absent
    int label = -1;
    int fst = -1;
    int age_group = -1;
    int gender = -1;
};

struct Manifest {
    std::vector<SampleRecord> rows;
};

// Reads the manifest CSV (header: image,mask,label,fst,age_group,gender).
// Labels are resolved against class_names; paths are resolved relative to the
// CSV's directory. Rows with a blank fst but a present mask get fst filled by
// the ITA estimate of the referenced image. Throws ParseError with the line
// number on malformed rows and MissingFile on unresolvable paths.
Manifest load_manifest(const std::string& path, const std::vector<std::string>& class_names);

void save_manifest(const Manifest& m, const std::string& path,
                   const std::vector<std::string>& class_names);

// Synthetic corpus: 32x32 uniform-skin images with an elliptical lesion.
// Lesion class (4 classes by darkness/eccentricity) correlates with the FST
// group with strength `bias`; age/gender skews are independent knobs.
struct SynthConfig {
    int n = 4000;
    double bias = 0.0;          // 0 = independent, 1 = class determined by FST
    double age_skew = 0.0;      // shifts age-band odds, 0 = uniform
    double gender_skew = 0.0;   // shifts M/F odds, 0 = even
    std::uint64_t seed = 0;
    std::string out_dir;        // images and masks written here
};

// Label ids of the synthetic corpus, in id order: darkness x eccentricity.
const std::vector<std::string>& synthetic_class_names();

// Writes images/, masks/ and manifest.csv under cfg.out_dir. The returned
// manifest carries out_dir-joined paths; the CSV stores them relative to
// itself. Identical cfg (seed included) reproduces every byte.
Manifest generate_synthetic(const SynthConfig& cfg);

// Loads every row into one dense batch; attribute columns are
// (fst, age_group, gender), -1 preserved as "unknown". All images must share
// one resolution.
Batch load_batch(const Manifest& m);

}  // namespace fairskin
