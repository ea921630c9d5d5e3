#pragma once

#include "farfield/audio.hpp"
#include "farfield/beamform.hpp"
#include "farfield/common.hpp"
#include "farfield/diarize.hpp"
#include "farfield/features.hpp"
#include "farfield/fft.hpp"
#include "farfield/gss.hpp"
#include "farfield/metrics.hpp"
#include "farfield/pipeline.hpp"
#include "farfield/reseg.hpp"
#include "farfield/sad.hpp"
#include "farfield/segments.hpp"
#include "farfield/simulate.hpp"
#include "farfield/stft.hpp"
#include "farfield/wpe.hpp"
