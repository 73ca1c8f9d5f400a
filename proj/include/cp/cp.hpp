#pragma once

#include "cp/kv_cache.hpp"
#include "cp/oracle.hpp"
#include "cp/perf_model.hpp"
#include "cp/profiles.hpp"
#include "cp/reports.hpp"
#include "cp/ring.hpp"
#include "cp/ring_engine.hpp"
#include "cp/rng.hpp"
#include "cp/scenario.hpp"
#include "cp/sharding.hpp"
#include "cp/tensor.hpp"
