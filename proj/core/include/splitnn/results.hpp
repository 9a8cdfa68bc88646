#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace splitnn {

// One evaluated (configuration, snr) cell of an experiment.
struct ResultRow {
  int split = 0;
  double ratio = 0.0;  // fraction of device-side filters removed
  int c_enc = 0;
  int bandwidth = 0;
  double snr_db = 0.0;
  double accuracy = 0.0;
  long long device_flops = 0;
  double baseline_accuracy = 0.0;  // unsplit classifier, same data and seed
  uint64_t seed = 0;
  // Wall-clock seconds per pipeline phase; carried in JSON output only so CSV
  // rows stay byte-identical across reruns and resumes.
  std::map<std::string, double> timings_s;
};

}  // namespace splitnn
