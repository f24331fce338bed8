#pragma once

#include "focustune/error.hpp"
#include "focustune/rng.hpp"
#include "focustune/logging.hpp"
#include "focustune/text_corpus.hpp"
#include "focustune/retrieval.hpp"
#include "focustune/dataset_synth.hpp"
#include "focustune/model.hpp"
#include "focustune/checkpoint.hpp"
#include "focustune/training.hpp"
#include "focustune/evaluation.hpp"
#include "focustune/config.hpp"
#include "focustune/encoder_client.hpp"
#include "focustune/experiment.hpp"
