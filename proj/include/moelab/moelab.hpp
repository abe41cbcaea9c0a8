#pragma once

#include "moelab/calibration.hpp"
#include "moelab/corpus.hpp"
#include "moelab/criteria.hpp"
#include "moelab/digest.hpp"
#include "moelab/errors.hpp"
#include "moelab/eval.hpp"
#include "moelab/finetune.hpp"
#include "moelab/linalg.hpp"
#include "moelab/model.hpp"
#include "moelab/persistence.hpp"
#include "moelab/pipeline.hpp"
#include "moelab/pruning.hpp"
#include "moelab/report.hpp"
#include "moelab/rng.hpp"

namespace moelab {
inline constexpr const char* kToolVersion = "1.0.0";
}
