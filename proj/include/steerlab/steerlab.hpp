#pragma once

#include "steerlab/activation_store.hpp"
#include "steerlab/analysis.hpp"
#include "steerlab/annotator.hpp"
#include "steerlab/config.hpp"
#include "steerlab/extraction_loop.hpp"
#include "steerlab/external_process.hpp"
#include "steerlab/probe_engine.hpp"
#include "steerlab/steering_engine.hpp"
#include "steerlab/subject_model.hpp"
